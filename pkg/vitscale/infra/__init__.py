from .checkpoints import load_checkpoint, load_features, save_checkpoint, save_features
from .runs import RunTable, attach_compute, load_shape_table, parse_runs_csv
from .settings import SettingsLoader

__all__ = [
    "SettingsLoader",
    "RunTable",
    "parse_runs_csv",
    "attach_compute",
    "load_shape_table",
    "save_checkpoint",
    "load_checkpoint",
    "save_features",
    "load_features",
]
