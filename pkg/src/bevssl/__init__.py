"""Semi-supervised BEV online-mapping laboratory on a synthetic benchmark."""

__version__ = "0.1.0"
