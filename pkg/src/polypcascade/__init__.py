"""Multi-resolution cascaded classification of colorectal polyp patches."""

__version__ = "0.1.0"
