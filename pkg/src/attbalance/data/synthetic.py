"""
Deterministic generator of toy referring-grounding scenes.

Each scene is a grid of cells; objects are rectangular blocks whose cells
carry one-hot shape, color and size features plus an objectness flag, all
perturbed by Gaussian noise. Every expression is checked by an exhaustive
matcher to pick out exactly one object. A configurable share of samples puts
an identical twin of the target in the scene, so only a spatial relation to
an anchor object outside the target box disambiguates it.
"""

import logging
import math
from dataclasses import replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..config.run_config import N_SIZE_CLASSES, DatasetConfig
from ..errors import DatasetError
from ..geometry import CornerBox, from_corners, to_corners
from .dataset import SPLITS, Expression, GroundingDataset, GroundingSample, SceneObject
from .vocabulary import ARTICLE, OF, SIZE_WORDS, Vocabulary

logger = logging.getLogger(__name__)

MAX_SCENE_ATTEMPTS = 500
_SPLIT_STREAM = {"train": 0, "val": 1}

# Attribute subsets tried, shortest first, when describing an object.
_DESCRIPTIONS = (("shape",), ("color", "shape"), ("size", "shape"), ("size", "color", "shape"))


def size_class(height: int, width: int, config: DatasetConfig) -> int:
    """0 ("small") or 1 ("big") from the block's longer side."""
    return 0 if max(height, width) <= (config.min_side + config.max_side) / 2 else 1


def expression_words(expression: Expression, vocab: Vocabulary) -> List[str]:
    words = [ARTICLE]
    if expression.size is not None:
        words.append(SIZE_WORDS[expression.size])
    if expression.color is not None:
        words.append(vocab.colors[expression.color])
    words.append(vocab.shapes[expression.shape])
    if expression.relation is not None and expression.anchor is not None:
        words.extend([expression.relation, OF])
        words.extend(expression_words(expression.anchor, vocab))
    return words


def _attributes_match(expression: Expression, obj: SceneObject) -> bool:
    return (
        obj.shape == expression.shape
        and (expression.color is None or obj.color == expression.color)
        and (expression.size is None or obj.size == expression.size)
    )


def _related(obj: SceneObject, anchor: SceneObject, relation: str) -> bool:
    if relation == "left":
        return obj.center_x() < anchor.center_x()
    return obj.center_x() > anchor.center_x()


def match(expression: Expression, objects: Sequence[SceneObject]) -> List[int]:
    """Indices of every object the expression describes."""
    hits = []
    for i, obj in enumerate(objects):
        if not _attributes_match(expression, obj):
            continue
        if expression.relation is None or expression.anchor is None:
            hits.append(i)
            continue
        anchors = [
            j for j in match(expression.anchor, objects) if j != i
        ]
        if any(_related(obj, objects[j], expression.relation) for j in anchors):
            hits.append(i)
    return hits


def _describe(obj: SceneObject, objects: Sequence[SceneObject], index: int) -> Optional[Expression]:
    """Shortest attribute phrase that picks out ``objects[index]`` alone."""
    for attrs in _DESCRIPTIONS:
        candidate = Expression(
            shape=obj.shape,
            color=obj.color if "color" in attrs else None,
            size=obj.size if "size" in attrs else None,
        )
        if match(candidate, objects) == [index]:
            return candidate
    return None


class _Canvas:
    def __init__(self, config: DatasetConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.occupied = np.zeros((config.grid_h, config.grid_w), dtype=bool)
        self.objects: List[SceneObject] = []

    def place(
        self,
        shape: int,
        color: int,
        height: int,
        width: int,
        where: Optional[Callable[[float], bool]] = None,
    ) -> Optional[SceneObject]:
        rows, cols = self.occupied.shape
        spots = []
        for r in range(rows - height + 1):
            for c in range(cols - width + 1):
                if self.occupied[r : r + height, c : c + width].any():
                    continue
                if where is not None and not where(c + width / 2):
                    continue
                spots.append((r, c))
        if not spots:
            return None
        r, c = spots[int(self.rng.integers(len(spots)))]
        obj = SceneObject(
            shape=shape,
            color=color,
            size=size_class(height, width, self.config),
            row=r,
            col=c,
            height=height,
            width=width,
        )
        self.occupied[r : r + height, c : c + width] = True
        self.objects.append(obj)
        return obj

    def random_dims(self) -> Tuple[int, int]:
        cfg = self.config
        return (
            int(self.rng.integers(cfg.min_side, cfg.max_side + 1)),
            int(self.rng.integers(cfg.min_side, cfg.max_side + 1)),
        )

    def random_attributes(self) -> Tuple[int, int]:
        return int(self.rng.integers(self.config.n_shapes)), int(self.rng.integers(self.config.n_colors))


def target_dimensions(config: DatasetConfig) -> List[Tuple[int, int]]:
    """Block sizes whose box ratio lies inside the configured range."""
    area = config.grid_h * config.grid_w
    dims = []
    for h in range(config.min_side, config.max_side + 1):
        for w in range(config.min_side, config.max_side + 1):
            if config.box_ratio_min <= h * w / area <= config.box_ratio_max:
                dims.append((h, w))
    return dims


def _add_distractors(canvas: _Canvas, target: SceneObject, count: int) -> bool:
    cfg = canvas.config
    for _ in range(count):
        shape, color = canvas.random_attributes()
        if canvas.rng.random() < cfg.share_attribute_prob:
            if canvas.rng.random() < 0.5:
                shape = target.shape
            else:
                color = target.color
        height, width = canvas.random_dims()
        if canvas.place(shape, color, height, width) is None:
            return False
    return True


def _plain_scene(
    canvas: _Canvas, dims: List[Tuple[int, int]]
) -> Optional[Tuple[int, Expression]]:
    cfg = canvas.config
    n_objects = int(canvas.rng.integers(cfg.min_objects, cfg.max_objects + 1))
    height, width = dims[int(canvas.rng.integers(len(dims)))]
    target = canvas.place(*canvas.random_attributes(), height, width)
    if target is None or not _add_distractors(canvas, target, n_objects - 1):
        return None
    expression = _describe(target, canvas.objects, 0)
    return None if expression is None else (0, expression)


def _relation_scene(
    canvas: _Canvas, dims: List[Tuple[int, int]]
) -> Optional[Tuple[int, Expression]]:
    cfg = canvas.config
    n_objects = int(canvas.rng.integers(max(cfg.min_objects, 3), cfg.max_objects + 1))
    relation = "left" if canvas.rng.random() < 0.5 else "right"
    height, width = dims[int(canvas.rng.integers(len(dims)))]
    shape, color = canvas.random_attributes()

    anchor_shape, anchor_color = canvas.random_attributes()
    if (anchor_shape, anchor_color) == (shape, color):
        return None
    anchor = canvas.place(anchor_shape, anchor_color, *canvas.random_dims())
    if anchor is None:
        return None
    ax = anchor.center_x()
    before = (lambda x: x < ax) if relation == "left" else (lambda x: x > ax)
    after = (lambda x: x > ax) if relation == "left" else (lambda x: x < ax)

    target = canvas.place(shape, color, height, width, where=before)
    twin = canvas.place(shape, color, height, width, where=after)
    if target is None or twin is None:
        return None
    if not _add_distractors(canvas, target, n_objects - 3):
        return None

    target_index = canvas.objects.index(target)
    anchor_phrase = _describe(anchor, canvas.objects, canvas.objects.index(anchor))
    if anchor_phrase is None:
        return None
    expression = Expression(shape=shape, color=color, relation=relation, anchor=anchor_phrase)
    return target_index, expression


def _render(canvas: _Canvas) -> np.ndarray:
    cfg = canvas.config
    features = np.zeros((cfg.grid_h, cfg.grid_w, cfg.feature_dim))
    size_offset = cfg.n_shapes + cfg.n_colors
    for obj in canvas.objects:
        for r, c in obj.cells():
            features[r, c, obj.shape] = 1.0
            features[r, c, cfg.n_shapes + obj.color] = 1.0
            features[r, c, size_offset + obj.size] = 1.0
            features[r, c, size_offset + N_SIZE_CLASSES] = 1.0
    if cfg.noise_std > 0:
        features = features + canvas.rng.normal(0.0, cfg.noise_std, size=features.shape)
    return features


def uses_relation_at(index: int, relation_prob: float) -> bool:
    """Spread relation samples evenly: exactly floor(n * p) among the first n."""
    return math.floor((index + 1) * relation_prob) > math.floor(index * relation_prob)


def generate_sample(
    config: DatasetConfig, vocab: Vocabulary, split: str, index: int
) -> GroundingSample:
    """Build sample ``index`` of ``split`` from its own derived random stream."""
    rng = np.random.default_rng([config.seed, _SPLIT_STREAM[split], index])
    dims = target_dimensions(config)
    with_relation = config.relation_prob > 0 and uses_relation_at(index, config.relation_prob)
    sample_id = f"{split}-{index:05d}"

    for _ in range(MAX_SCENE_ATTEMPTS):
        canvas = _Canvas(config, rng)
        built = _relation_scene(canvas, dims) if with_relation else _plain_scene(canvas, dims)
        if built is None:
            continue
        target_index, expression = built
        if match(expression, canvas.objects) != [target_index]:
            continue
        words = expression_words(expression, vocab)
        if len(words) > config.max_text_len:
            continue
        target = canvas.objects[target_index]
        return GroundingSample(
            sample_id=sample_id,
            split=split,
            features=_render(canvas),
            tokens=vocab.encode(words),
            box=target.box((config.grid_h, config.grid_w)),
            expression=expression,
            objects=tuple(canvas.objects),
            target_index=target_index,
        )
    raise DatasetError(
        f"could not build a uniquely referable scene for {sample_id} "
        f"after {MAX_SCENE_ATTEMPTS} attempts; loosen the dataset configuration"
    )


def _check_satisfiable(config: DatasetConfig) -> None:
    errors = config.validate()
    if errors:
        raise DatasetError("unsatisfiable dataset configuration: " + "; ".join(errors))
    if not target_dimensions(config):
        raise DatasetError(
            f"no block between {config.min_side} and {config.max_side} cells per side has a box "
            f"ratio in [{config.box_ratio_min}, {config.box_ratio_max}]"
        )
    if config.relation_prob > 0 and (config.max_objects < 3 or config.grid_w < 3):
        raise DatasetError("relation samples need max_objects >= 3 and a grid at least 3 wide")


def generate(config: DatasetConfig) -> GroundingDataset:
    """Generate the train and val splits; fully determined by ``config``."""
    _check_satisfiable(config)
    vocab = Vocabulary(config)
    samples = []
    for split, count in zip(SPLITS, (config.n_train, config.n_val)):
        for index in range(count):
            samples.append(generate_sample(config, vocab, split, index))
    n_relation = sum(s.uses_relation for s in samples)
    logger.info(
        f"Generated {config.n_train} train / {config.n_val} val samples "
        f"({n_relation} need a relation cue)"
    )
    return GroundingDataset(config=config, samples=samples)


def _crop_window(rng: np.random.Generator, box: CornerBox, min_scale: float) -> CornerBox:
    lo, hi = [], []
    for start, stop in ((box.x1, box.x2), (box.y1, box.y2)):
        extent = max(rng.uniform(min_scale, 1.0), stop - start)
        first = max(0.0, stop - extent)
        last = min(start, 1.0 - extent)
        offset = first if last <= first else rng.uniform(first, last)
        # Rounding must never shave the box edges off the window.
        lo.append(min(offset, start))
        hi.append(max(offset + extent, stop))
    return CornerBox(lo[0], lo[1], hi[0], hi[1])


def crop_to_window(sample: GroundingSample, window: CornerBox) -> GroundingSample:
    """Re-render the part of the scene inside ``window`` at full grid resolution."""
    if window == CornerBox(0.0, 0.0, 1.0, 1.0):
        return sample
    box = to_corners(sample.box)
    if not window.contains(box):
        raise DatasetError(f"crop window {window} cuts the ground-truth box {box}")
    rows, cols = sample.grid
    span_x, span_y = window.x2 - window.x1, window.y2 - window.y1
    src_rows = np.minimum(
        np.floor((window.y1 + (np.arange(rows) + 0.5) / rows * span_y) * rows).astype(int), rows - 1
    )
    src_cols = np.minimum(
        np.floor((window.x1 + (np.arange(cols) + 0.5) / cols * span_x) * cols).astype(int), cols - 1
    )
    features = sample.features[src_rows][:, src_cols]
    remapped = CornerBox(
        (box.x1 - window.x1) / span_x,
        (box.y1 - window.y1) / span_y,
        (box.x2 - window.x1) / span_x,
        (box.y2 - window.y1) / span_y,
    )
    return replace(
        sample,
        features=features,
        box=from_corners(remapped),
        objects=(),
        target_index=-1,
    )


def augment_crop(sample: GroundingSample, seed, min_scale: float = 0.6) -> GroundingSample:
    """Random crop that always keeps the whole ground-truth box."""
    rng = np.random.default_rng(seed)
    window = _crop_window(rng, to_corners(sample.box), min_scale)
    return crop_to_window(sample, window)
