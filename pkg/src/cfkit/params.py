"""Named parameter groups with a designated classification head, plus disk I/O.

Serialized layout is a directory of flat little-endian binary arrays and an
``index.json`` mapping group name -> {shape, dtype, file, is_head}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .types import ShapeMismatchError


@dataclass
class ParameterSet:
    """Model parameters split into named groups; head_groups marks the classifier head."""

    groups: dict[str, np.ndarray]
    head_groups: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.groups = {k: np.asarray(v, dtype=np.float64) for k, v in self.groups.items()}
        self.head_groups = frozenset(self.head_groups)
        missing = self.head_groups - set(self.groups)
        if missing:
            raise ShapeMismatchError(f"head groups not present in groups: {sorted(missing)}")
        for name, arr in self.groups.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"group {name!r} contains non-finite values")

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.groups.items()}, self.head_groups)

    def same_structure(self, other: "ParameterSet") -> bool:
        if set(self.groups) != set(other.groups):
            return False
        return all(self.groups[k].shape == other.groups[k].shape for k in self.groups)

    def body_group_names(self) -> list[str]:
        return sorted(set(self.groups) - self.head_groups)


def save_parameters(params: ParameterSet, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(params.groups):
        arr = params.groups[name]
        fname = name.replace("/", "_").replace(".", "_") + ".bin"
        arr.astype("<f8").tofile(out / fname)
        index[name] = {
            "shape": list(arr.shape),
            "dtype": "<f8",
            "file": fname,
            "is_head": name in params.head_groups,
        }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return out


def load_parameters(in_dir: str | Path) -> ParameterSet:
    src = Path(in_dir)
    index = json.loads((src / "index.json").read_text())
    groups = {}
    head = set()
    for name, meta in index.items():
        arr = np.fromfile(src / meta["file"], dtype=meta["dtype"])
        groups[name] = arr.reshape(meta["shape"]).astype(np.float64)
        if meta["is_head"]:
            head.add(name)
    return ParameterSet(groups, frozenset(head))
