"""
Miniature fusion transformer for visual grounding.

The input sequence is ``[object query, text tokens, visual tokens]``. The
final object-query state is regressed into a ``(cx, cy, w, h)`` box by a
three-layer MLP with a sigmoid output. For each captured layer the module
recomputes a query-to-visual attention map: the object-query row against the
visual keys only, averaged over heads, then softmax over the visual cells.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..data.dataset import GroundingSample
from ..errors import DimensionError, NumericalError
from ..geometry import SegMask
from ..numerics import (
    Tensor,
    add,
    concat,
    getitem,
    layer_norm,
    linear,
    matmul,
    mean_over_axis,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sum_all,
    transpose,
)
from .params import ModelParams

logger = logging.getLogger(__name__)


@dataclass
class AttentionStack:
    """Captured query-to-visual maps of selected layers.

    ``maps[k]`` and ``similarities[k]`` belong to ``layers[k]``; layers are
    strictly increasing.
    """

    layers: List[int] = field(default_factory=list)
    maps: List[Tensor] = field(default_factory=list)
    similarities: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.layers) == len(self.maps) == len(self.similarities):
            raise DimensionError(
                f"attention stack: {len(self.layers)} layers, {len(self.maps)} maps, "
                f"{len(self.similarities)} similarity rows"
            )
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError(f"attention stack layers must be strictly increasing: {self.layers}")

    def __len__(self) -> int:
        return len(self.layers)

    def map_for(self, layer: int) -> Tensor:
        try:
            return self.maps[self.layers.index(layer)]
        except ValueError:
            raise KeyError(f"layer {layer} was not captured (captured: {self.layers})") from None

    def select(self, layers: Iterable[int]) -> "AttentionStack":
        """Sub-stack restricted to ``layers`` (all of which must be captured)."""
        wanted = sorted(set(layers))
        idx = []
        for layer in wanted:
            if layer not in self.layers:
                raise KeyError(f"layer {layer} was not captured (captured: {self.layers})")
            idx.append(self.layers.index(layer))
        return AttentionStack(
            layers=wanted,
            maps=[self.maps[i] for i in idx],
            similarities=[self.similarities[i] for i in idx],
        )

    def detached(self) -> "AttentionStack":
        return AttentionStack(
            layers=list(self.layers),
            maps=[m.detach() for m in self.maps],
            similarities=[s.detach() for s in self.similarities],
        )

    def in_mask_tensors(self, mask: SegMask) -> List[Tensor]:
        """Differentiable attention mass inside ``mask`` per captured layer."""
        flat = mask.flat.astype(np.float64)
        out = []
        for layer, a in zip(self.layers, self.maps):
            if a.shape != flat.shape:
                raise DimensionError(
                    f"layer {layer}: attention map {a.shape} does not match mask {flat.shape}"
                )
            out.append(sum_all(mul(a, Tensor(flat))))
        return out

    def in_mask_sums(self, mask: SegMask) -> List[float]:
        flat = mask.flat.astype(np.float64)
        sums = []
        for layer, a in zip(self.layers, self.maps):
            if a.shape != flat.shape:
                raise DimensionError(
                    f"layer {layer}: attention map {a.shape} does not match mask {flat.shape}"
                )
            sums.append(float(np.sum(a.data * flat)))
        return sums


def head_averaged_similarity(query: Tensor, keys: Tensor, n_heads: int) -> Tensor:
    """Scaled query-key similarity averaged over heads.

    ``query`` is ``[C]``, ``keys`` is ``[N, C]``; both are split into
    ``n_heads`` slices of width ``d_k = C / n_heads``. Returns ``[N]``.
    """
    if query.ndim != 1 or keys.ndim != 2 or keys.shape[1] != query.shape[0]:
        raise DimensionError(f"similarity: incompatible shapes {query.shape} and {keys.shape}")
    width = query.shape[0]
    if width % n_heads != 0:
        raise DimensionError(f"similarity: width {width} not divisible by {n_heads} heads")
    d_k = width // n_heads
    n = keys.shape[0]
    q = reshape(query, (n_heads, 1, d_k))
    k = transpose(reshape(keys, (n, n_heads, d_k)), (1, 2, 0))  # [heads, d_k, N]
    scores = scale(matmul(q, k), 1.0 / math.sqrt(d_k))  # [heads, 1, N]
    return reshape(mean_over_axis(scores, axis=0), (n,))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, width = x.shape
    return transpose(reshape(x, (t, n_heads, width // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    n_heads, t, d_k = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, n_heads * d_k))


def _check_finite(x: Tensor, component: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite activations in {component}", component=component)


def _encoder_layer(
    params: ModelParams, i: int, x: Tensor, visual_start: int, capture: bool
) -> Tuple[Tensor, Optional[Tensor]]:
    """One pre-norm encoder layer; also returns the captured similarity row."""
    cfg = params.config
    p = f"layers.{i}"
    wq, bq = params[f"{p}.attn.q.weight"], params[f"{p}.attn.q.bias"]
    wk, bk = params[f"{p}.attn.k.weight"], params[f"{p}.attn.k.bias"]

    h = layer_norm(x, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
    q = linear(h, wq, bq)
    k = linear(h, wk, bk)
    v = linear(h, params[f"{p}.attn.v.weight"], params[f"{p}.attn.v.bias"])

    similarity = None
    if capture:
        if cfg.capture_state == "normed":
            query_row = getitem(q, 0)
            visual_keys = getitem(k, slice(visual_start, None))
        else:
            query_row = linear(getitem(x, 0), wq, bq)
            visual_keys = linear(getitem(x, slice(visual_start, None)), wk, bk)
        similarity = head_averaged_similarity(query_row, visual_keys, cfg.n_heads)

    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(cfg.d_head))
    context = _merge_heads(matmul(softmax(scores, axis=-1), vh))
    x = add(x, linear(context, params[f"{p}.attn.out.weight"], params[f"{p}.attn.out.bias"]))

    h2 = layer_norm(x, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"])
    hidden = relu(linear(h2, params[f"{p}.ffn.fc1.weight"], params[f"{p}.ffn.fc1.bias"]))
    x = add(x, linear(hidden, params[f"{p}.ffn.fc2.weight"], params[f"{p}.ffn.fc2.bias"]))
    return x, similarity


def _check_sample(params: ModelParams, sample: GroundingSample) -> None:
    cfg = params.config
    expected = (cfg.grid_h, cfg.grid_w, cfg.feature_dim)
    if sample.features.shape != expected:
        raise DimensionError(
            f"sample {sample.sample_id}: features {sample.features.shape}, model expects {expected}"
        )
    n_tokens = len(sample.tokens)
    if not 1 <= n_tokens <= cfg.max_text_len:
        raise DimensionError(
            f"sample {sample.sample_id}: {n_tokens} text tokens, model accepts 1..{cfg.max_text_len}"
        )
    if min(sample.tokens) < 0 or max(sample.tokens) >= cfg.vocab_size:
        raise DimensionError(
            f"sample {sample.sample_id}: token ids outside vocabulary of {cfg.vocab_size}"
        )


def _capture_set(params: ModelParams, capture_layers: Iterable[int]) -> List[int]:
    layers = sorted(set(int(i) for i in capture_layers))
    bad = [i for i in layers if not 0 <= i < params.config.n_layers]
    if bad:
        raise ValueError(
            f"capture layers {bad} outside [0, {params.config.n_layers})"
        )
    return layers


def forward(
    params: ModelParams, sample: GroundingSample, capture_layers: Iterable[int] = ()
) -> Tuple[Tensor, AttentionStack]:
    """Predict a box for ``sample`` and capture attention maps of ``capture_layers``.

    Returns the ``(cx, cy, w, h)`` prediction as a ``[4]`` tensor and an
    :class:`AttentionStack` whose maps stay on the tape.
    """
    cfg = params.config
    _check_sample(params, sample)
    capture = _capture_set(params, capture_layers)

    n_text = len(sample.tokens)
    text = add(
        getitem(params["embed.token"], np.asarray(sample.tokens, dtype=np.int64)),
        getitem(params["embed.text_pos"], slice(0, n_text)),
    )
    visual = add(
        linear(
            Tensor(sample.visual_tokens),
            params["embed.visual_proj.weight"],
            params["embed.visual_proj.bias"],
        ),
        params["embed.visual_pos"],
    )
    x = concat([params["embed.object_query"], text, visual], axis=0)
    visual_start = 1 + n_text

    maps, similarities = [], []
    for i in range(cfg.n_layers):
        x, similarity = _encoder_layer(params, i, x, visual_start, capture=i in capture)
        _check_finite(x, f"layer {i}")
        if similarity is not None:
            similarities.append(similarity)
            maps.append(softmax(similarity, axis=0))

    out = layer_norm(getitem(x, 0), params["final_norm.gain"], params["final_norm.bias"])
    hidden = relu(linear(out, params["head.fc1.weight"], params["head.fc1.bias"]))
    hidden = relu(linear(hidden, params["head.fc2.weight"], params["head.fc2.bias"]))
    pred = sigmoid(linear(hidden, params["head.fc3.weight"], params["head.fc3.bias"]))
    _check_finite(pred, "head")
    return pred, AttentionStack(layers=capture, maps=maps, similarities=similarities)


def forward_batch(
    params: ModelParams,
    samples: Sequence[GroundingSample],
    capture_layers: Iterable[int] = (),
) -> List[Tuple[Tensor, AttentionStack]]:
    """:func:`forward` over ``samples`` in order; no state is shared between samples."""
    layers = list(capture_layers)
    return [forward(params, sample, layers) for sample in samples]
