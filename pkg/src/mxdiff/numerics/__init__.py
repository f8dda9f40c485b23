"""Minimal tensor engine: NCHW tensors, reverse-mode tape, op library."""

from . import ops
from .container import ContainerError, load_tensors, read_record, save_tensors, write_record
from .tensor import (
    MAX_RANK,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    ones,
    tensor,
    zeros,
)

__all__ = [
    "MAX_RANK",
    "ContainerError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "load_tensors",
    "ones",
    "ops",
    "read_record",
    "save_tensors",
    "tensor",
    "write_record",
    "zeros",
]
