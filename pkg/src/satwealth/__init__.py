"""Poverty mapping from multispectral satellite tiles: compositing, nightlight-class
pretraining with dilated first layers, ridge/GBT heads and cross-country evaluation."""

__version__ = "0.1.0"
