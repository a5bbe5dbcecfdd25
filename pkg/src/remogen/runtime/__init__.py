"""Runtime surface: codecs, configuration, engine, streaming loop, benchmark."""

from .bench import bench, format_bench
from .codecs import (
    WeightArchive,
    load_archive,
    load_motion,
    load_voxels,
    save_archive,
    save_motion,
    save_voxels,
)
from .config import EngineConfig, StreamRecord, format_record, load_config, parse_alpha, parse_config, parse_record
from .engine import Engine, init_weights
from .stream import stream_run

__all__ = [
    "WeightArchive", "load_archive", "save_archive",
    "load_motion", "save_motion", "load_voxels", "save_voxels",
    "EngineConfig", "StreamRecord", "parse_config", "load_config",
    "parse_record", "format_record", "parse_alpha",
    "Engine", "init_weights", "stream_run", "bench", "format_bench",
]
