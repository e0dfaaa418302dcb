from .dataset import (SPLIT_NAMES, TRAIN, VAL_IID, VAL_OOD, Dataset, DatasetBalanceError,
                      Example, build_dataset)
from .io import export_jsonl, load_dataset, save_dataset
from .scene import GridSpec, render, sample_grid, standardize, symbolic_execute
from .templates import TEMPLATES, enumerate_questions

__all__ = [
    "SPLIT_NAMES", "TRAIN", "VAL_IID", "VAL_OOD", "Dataset", "DatasetBalanceError", "Example",
    "build_dataset", "export_jsonl", "load_dataset", "save_dataset", "GridSpec", "render",
    "sample_grid", "standardize", "symbolic_execute", "TEMPLATES", "enumerate_questions",
]
