"""
Grounding samples, datasets and their on-disk formats.

Two formats are supported. ``jsonl``: a header line carrying the
:class:`DatasetConfig`, then one canonical JSON object per sample.
``binary``: the versioned container from :mod:`attbalance.serialization`
with per-sample feature grids and boxes as float64 tensors.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config.run_config import DatasetConfig
from ..errors import DatasetError
from ..geometry import BoxSpec
from ..serialization import read_container, write_container

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"ATTBDSET"
DATASET_FORMAT = "attbalance-dataset"
DATASET_VERSION = 1
SPLITS = ("train", "val")


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class SceneObject:
    """An axis-aligned block of grid cells carrying three attributes."""

    shape: int
    color: int
    size: int
    row: int
    col: int
    height: int
    width: int

    def box(self, grid: Tuple[int, int]) -> BoxSpec:
        rows, cols = grid
        return BoxSpec(
            (self.col + self.width / 2) / cols,
            (self.row + self.height / 2) / rows,
            self.width / cols,
            self.height / rows,
        )

    def center_x(self) -> float:
        """Horizontal center in cell units."""
        return self.col + self.width / 2

    def cells(self):
        for r in range(self.row, self.row + self.height):
            for c in range(self.col, self.col + self.width):
                yield r, c


@dataclass(frozen=True)
class Expression:
    """Attribute phrase with an optional spatial relation to an anchor phrase."""

    shape: int
    color: Optional[int] = None
    size: Optional[int] = None
    relation: Optional[str] = None
    anchor: Optional["Expression"] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Expression":
        data = dict(data)
        if data.get("anchor") is not None:
            data["anchor"] = cls.from_dict(data["anchor"])
        return cls(**data)


@dataclass(eq=False)
class GroundingSample:
    """One scene, its referring expression and the ground-truth box."""

    sample_id: str
    split: str
    features: np.ndarray  # [grid_h, grid_w, feature_dim]
    tokens: List[int]
    box: BoxSpec
    expression: Optional[Expression] = None
    objects: Tuple[SceneObject, ...] = ()
    target_index: int = -1

    @property
    def grid(self) -> Tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    @property
    def visual_tokens(self) -> np.ndarray:
        rows, cols, dim = self.features.shape
        return self.features.reshape(rows * cols, dim)

    @property
    def uses_relation(self) -> bool:
        return self.expression is not None and self.expression.relation is not None

    def to_record(self, with_arrays: bool = True) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "id": self.sample_id,
            "split": self.split,
            "tokens": list(self.tokens),
            "expression": self.expression.to_dict() if self.expression else None,
            "objects": [asdict(o) for o in self.objects],
            "target_index": self.target_index,
        }
        if with_arrays:
            record["box"] = list(self.box.as_tuple())
            record["features"] = self.features.tolist()
        return record

    @classmethod
    def from_record(
        cls,
        record: Dict[str, Any],
        features: Optional[np.ndarray] = None,
        box: Optional[Sequence[float]] = None,
    ) -> "GroundingSample":
        features = np.asarray(record["features"] if features is None else features, dtype=np.float64)
        box = record["box"] if box is None else box
        expression = record.get("expression")
        return cls(
            sample_id=record["id"],
            split=record["split"],
            features=features,
            tokens=[int(t) for t in record["tokens"]],
            box=BoxSpec.from_array(box),
            expression=Expression.from_dict(expression) if expression else None,
            objects=tuple(SceneObject(**o) for o in record.get("objects", [])),
            target_index=int(record.get("target_index", -1)),
        )


@dataclass
class GroundingDataset:
    config: DatasetConfig
    samples: List[GroundingSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> List[GroundingSample]:
        if name not in SPLITS:
            raise DatasetError(f"Unknown split: {name}. Must be one of: {list(SPLITS)}")
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> List[GroundingSample]:
        return self.split("train")

    @property
    def val(self) -> List[GroundingSample]:
        return self.split("val")

    def lookup(self, sample_id: str) -> GroundingSample:
        for sample in self.samples:
            if sample.sample_id == sample_id:
                return sample
        raise DatasetError(f"No sample with id {sample_id!r}")

    def _header(self) -> Dict[str, Any]:
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "config": asdict(self.config),
        }

    def to_jsonl(self) -> str:
        lines = [_canonical(self._header())]
        lines.extend(_canonical(s.to_record()) for s in self.samples)
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON-lines encoding."""
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path], file_format: Optional[str] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_format = file_format or self.config.file_format
        if file_format == "jsonl":
            path.write_text(self.to_jsonl(), encoding="utf-8")
        elif file_format == "binary":
            tensors = {}
            for s in self.samples:
                tensors[f"{s.sample_id}/features"] = s.features
                tensors[f"{s.sample_id}/box"] = s.box.as_array()
            metadata = {
                "header": _canonical(self._header()),
                "samples": _canonical([s.to_record(with_arrays=False) for s in self.samples]),
            }
            write_container(path, DATASET_MAGIC, metadata, tensors)
        else:
            raise DatasetError(f"Unknown dataset format: {file_format}")
        logger.info(f"Saved {len(self.samples)} samples ({file_format}) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GroundingDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found: {path}")
        with open(path, "rb") as f:
            head = f.read(len(DATASET_MAGIC))
        if head == DATASET_MAGIC:
            return cls._load_binary(path)
        return cls._load_jsonl(path)

    @staticmethod
    def _check_header(header: Dict[str, Any], path: Path) -> DatasetConfig:
        if header.get("format") != DATASET_FORMAT:
            raise DatasetError(f"{path}: not an attbalance dataset")
        if header.get("version", 0) > DATASET_VERSION:
            raise DatasetError(f"{path}: dataset version {header['version']} is not supported")
        return DatasetConfig(**header["config"])

    @classmethod
    def _load_jsonl(cls, path: Path) -> "GroundingDataset":
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines:
            raise DatasetError(f"{path}: empty dataset file")
        try:
            header = json.loads(lines[0])
            config = cls._check_header(header, path)
            samples = [GroundingSample.from_record(json.loads(line)) for line in lines[1:]]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetError(f"{path}: malformed dataset file ({e})") from e
        return cls(config=config, samples=samples)

    @classmethod
    def _load_binary(cls, path: Path) -> "GroundingDataset":
        container = read_container(path, DATASET_MAGIC)
        config = cls._check_header(json.loads(container.metadata["header"]), path)
        samples = []
        for record in json.loads(container.metadata["samples"]):
            sid = record["id"]
            samples.append(
                GroundingSample.from_record(
                    record,
                    features=container.tensors[f"{sid}/features"],
                    box=container.tensors[f"{sid}/box"],
                )
            )
        return cls(config=config, samples=samples)
