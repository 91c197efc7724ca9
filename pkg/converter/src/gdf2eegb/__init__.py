"""GDF motor-imagery recordings to EEGB v1 trial containers."""

from .container import container_bytes, write_container
from .convert import RULES, ConversionError, convert
from .epochs import EpochBatch, EpochError, EpochSpec, extract_epochs, select_channels
from .gdf import GdfChannel, GdfError, GdfEvents, GdfRecording, read_gdf

__all__ = [
    "RULES",
    "ConversionError",
    "EpochBatch",
    "EpochError",
    "EpochSpec",
    "GdfChannel",
    "GdfError",
    "GdfEvents",
    "GdfRecording",
    "container_bytes",
    "convert",
    "extract_epochs",
    "read_gdf",
    "select_channels",
    "write_container",
]
