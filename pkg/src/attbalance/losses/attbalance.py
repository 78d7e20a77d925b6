"""
Attention regularization losses and difficulty-adaptive loss weighting.

Per captured layer ``i`` and sample with ground-truth mask ``M``:

* RAC term: ``-log(sum(a_i * M)) - log(1 - sum(a_i * (1 - M)))``, scaled by
  the layer's relative rho.
* MRC term: ``KL(a_i_momentum || a_i)``.

``L_ar = L_rac + L_mrc`` (batch means). The box-regression part
``alpha_1 * L_1 + alpha_g * L_giou`` is scaled per sample by the objective
difficulty weight (box ratio) and per batch by the actual difficulty weight
(rho-free ``L_ar``). Rhos and both weights are constants on the tape.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from ..config.run_config import AttBalanceConfig
from ..data.dataset import GroundingSample
from ..errors import DimensionError, GeometryError, NumericalError
from ..geometry import BoxSpec, SegMask, box_ratio, giou_loss, iou, l1_loss, rasterize_mask
from ..model.grounding_model import AttentionStack
from ..numerics import (
    DEFAULT_EPS_LOG,
    Tensor,
    add,
    log,
    mean_all,
    mul,
    neg,
    scale,
    stack_scalars,
    sub,
    sum_all,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Spearman's rho with average ranks for ties; ``None`` when undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"spearman: shapes {x.shape} and {y.shape} differ")
    if x.size < 2:
        return None
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0.0:
        return None
    return float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))


def batch_rho(in_mask_sums: Sequence[float], ious: Sequence[float]) -> float:
    """Rank correlation between in-mask attention and IoU over a batch.

    Degenerate batches (fewer than two samples or a constant side) give 1.0.
    """
    rho = spearman(in_mask_sums, ious)
    if rho is None:
        logger.debug(f"Degenerate rho over {len(in_mask_sums)} samples; using 1.0")
        return 1.0
    return rho


def relative_rho(rhos: Sequence[float]) -> List[float]:
    """``rho_i - mean(rho) + 1``: layer weights whose mean is one."""
    values = np.asarray(rhos, dtype=np.float64)
    if values.size < 1:
        raise ValueError("relative_rho needs at least one layer")
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite rho values: {values.tolist()}", component="rho")
    return (values - values.mean() + 1.0).tolist()


# ---------------------------------------------------------------------------
# Attention constraints
# ---------------------------------------------------------------------------


def _mask_arrays(attn: AttentionStack, mask: SegMask) -> Tuple[np.ndarray, np.ndarray]:
    inside = mask.flat.astype(np.float64)
    for layer, a in zip(attn.layers, attn.maps):
        if a.shape != inside.shape:
            raise DimensionError(
                f"layer {layer}: attention map {a.shape} does not match mask grid {mask.grid}"
            )
    return inside, 1.0 - inside


def rac_layer_terms(
    attn: AttentionStack, mask: SegMask, eps_log: float = DEFAULT_EPS_LOG
) -> List[Tensor]:
    """Unweighted RAC term of every captured layer for one sample."""
    inside, outside = _mask_arrays(attn, mask)
    terms = []
    for a in attn.maps:
        s_in = sum_all(mul(a, inside))
        s_out = sum_all(mul(a, outside))
        terms.append(sub(neg(log(s_in, eps_log)), log(sub(1.0, s_out), eps_log)))
    return terms


def rac_loss(
    attn: AttentionStack,
    mask: SegMask,
    rel_rhos: Sequence[float],
    eps_log: float = DEFAULT_EPS_LOG,
) -> Tensor:
    """Rho-weighted sum of RAC terms over the captured layers."""
    if len(rel_rhos) != len(attn):
        raise DimensionError(f"rac_loss: {len(attn)} layers but {len(rel_rhos)} rho weights")
    terms = rac_layer_terms(attn, mask, eps_log)
    return sum_all(mul(stack_scalars(terms), np.asarray(rel_rhos, dtype=np.float64)))


def mrc_layer_terms(
    attn_mom: AttentionStack, attn: AttentionStack, eps_log: float = DEFAULT_EPS_LOG
) -> List[Tensor]:
    """``KL(momentum || live)`` per layer; the momentum side is a constant."""
    if attn_mom.layers != attn.layers:
        raise DimensionError(
            f"mrc_loss: momentum layers {attn_mom.layers} differ from live layers {attn.layers}"
        )
    terms = []
    for layer, target, a in zip(attn.layers, attn_mom.maps, attn.maps):
        if target.shape != a.shape:
            raise DimensionError(f"layer {layer}: momentum map {target.shape} vs live {a.shape}")
        p = target.data
        log_p = np.log(np.maximum(p, eps_log))
        terms.append(sum_all(mul(p, sub(log_p, log(a, eps_log)))))
    return terms


def mrc_loss(
    attn_mom: AttentionStack, attn: AttentionStack, eps_log: float = DEFAULT_EPS_LOG
) -> Tensor:
    terms = mrc_layer_terms(attn_mom, attn, eps_log)
    if not terms:
        return Tensor(0.0)
    return sum_all(stack_scalars(terms))


# ---------------------------------------------------------------------------
# Difficulty weights
# ---------------------------------------------------------------------------


def adw(l_ar_plain: float) -> float:
    """Actual difficulty weight ``0.5 + sigmoid(L_ar)`` in ``[1, 1.5)``."""
    value = float(l_ar_plain)
    if math.isnan(value):
        raise NumericalError("actual difficulty weight of NaN loss", component="l_ar_plain")
    return 0.5 + float(expit(value))


def odw(ratio: float) -> float:
    """Objective difficulty weight ``0.5 + 1 / (1 + exp(ratio - 1))``; smaller boxes weigh more."""
    value = float(ratio)
    if not 0.0 < value <= 1.0:
        raise GeometryError(f"box ratio must be in (0, 1], got {value}")
    return 0.5 + float(expit(1.0 - value))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass
class LossComponents:
    """Differentiable per-sample loss pieces of one batch.

    ``rac_terms[s][k]`` and ``mrc_terms[s][k]`` refer to ``layers[k]``; both
    are empty when attention regularization is off for the step.
    """

    layers: List[int]
    l1: List[Tensor]
    giou: List[Tensor]
    rac_terms: List[List[Tensor]] = field(default_factory=list)
    mrc_terms: List[List[Tensor]] = field(default_factory=list)
    in_mask_sums: List[List[float]] = field(default_factory=list)
    ious: List[float] = field(default_factory=list)
    box_ratios: List[float] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return len(self.l1)


@dataclass(frozen=True)
class LossWeights:
    """Detached modulation weights of one batch."""

    layers: Tuple[int, ...]
    rho: Tuple[float, ...]
    rel_rho: Tuple[float, ...]
    w_adw: float
    w_odw: Tuple[float, ...]

    @classmethod
    def neutral(cls, layers: Sequence[int], batch_size: int) -> "LossWeights":
        n = len(layers)
        return cls(tuple(layers), (1.0,) * n, (1.0,) * n, 1.0, (1.0,) * batch_size)


@dataclass
class LossBreakdown:
    """Scalar view of one step's loss; serialized to the metrics stream."""

    rac_terms: List[float]
    rho: List[float]
    rel_rho: List[float]
    mrc_terms: List[float]
    l_rac: float
    l_mrc: float
    l_ar: float
    l_ar_plain: float
    w_adw: float
    w_odw: float
    l_1: float
    l_giou: float
    total: float
    layers: List[int] = field(default_factory=list)
    attbalance_on: bool = True
    w_odw_per_sample: List[float] = field(default_factory=list)
    l_1_per_sample: List[float] = field(default_factory=list)
    l_giou_per_sample: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)

    def recompose(self, cfg: AttBalanceConfig) -> float:
        """Recompute ``total`` from the logged components."""
        detection = [
            cfg.alpha_1 * l1 + cfg.alpha_g * lg
            for l1, lg in zip(self.l_1_per_sample, self.l_giou_per_sample)
        ]
        if not self.attbalance_on:
            return cfg.alpha_1 * self.l_1 + cfg.alpha_g * self.l_giou
        weighted = float(np.mean(np.asarray(self.w_odw_per_sample) * np.asarray(detection)))
        return cfg.alpha_ar * self.l_ar + self.w_adw * weighted


def _mean(tensors: Sequence[Tensor]) -> Tensor:
    return mean_all(stack_scalars(tensors))


def _values(tensors: Sequence[Tensor]) -> List[float]:
    return [t.item() for t in tensors]


def _check_finite(value: float, component: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {component} ({value})", component=component)


def compute_components(
    preds: Sequence[Tensor],
    attns: Sequence[AttentionStack],
    samples: Sequence[GroundingSample],
    cfg: AttBalanceConfig,
    attn_moms: Optional[Sequence[AttentionStack]] = None,
    regularize: bool = True,
) -> LossComponents:
    """Per-sample loss pieces for a batch of forward results.

    With ``regularize`` false only the box-regression terms are built.
    """
    if not len(preds) == len(attns) == len(samples):
        raise DimensionError(
            f"batch of {len(samples)} samples with {len(preds)} predictions and {len(attns)} stacks"
        )
    if not samples:
        raise ValueError("empty batch")
    layers = list(attns[0].layers)
    components = LossComponents(
        layers=layers,
        l1=[l1_loss(p, s.box, cfg.l1_reduction) for p, s in zip(preds, samples)],
        giou=[giou_loss(p, s.box) for p, s in zip(preds, samples)],
        box_ratios=[box_ratio(s.box) for s in samples],
        ious=[iou(BoxSpec.from_array(p.data), s.box) for p, s in zip(preds, samples)],
    )
    if not regularize:
        return components

    use_mrc = cfg.use_mrc and attn_moms is not None
    if cfg.use_mrc and attn_moms is None:
        raise ValueError("MRC is enabled but no momentum attention was given")
    for idx, (attn, sample) in enumerate(zip(attns, samples)):
        if attn.layers != layers:
            raise DimensionError(f"sample {sample.sample_id}: captured layers {attn.layers} != {layers}")
        mask = rasterize_mask(sample.box, sample.grid)
        components.rac_terms.append(rac_layer_terms(attn, mask, cfg.eps_log))
        components.in_mask_sums.append(attn.in_mask_sums(mask))
        if use_mrc:
            components.mrc_terms.append(mrc_layer_terms(attn_moms[idx], attn, cfg.eps_log))
    return components


def _plain_l_ar(components: LossComponents, cfg: AttBalanceConfig) -> float:
    value = 0.0
    if cfg.use_rac and components.rac_terms:
        value += float(np.mean([sum(_values(terms)) for terms in components.rac_terms]))
    if cfg.use_mrc and components.mrc_terms:
        value += float(np.mean([sum(_values(terms)) for terms in components.mrc_terms]))
    return value


def compute_weights(components: LossComponents, cfg: AttBalanceConfig) -> LossWeights:
    """Rhos, relative rhos and difficulty weights, all detached."""
    layers = components.layers
    if not components.rac_terms:
        return LossWeights.neutral(layers, components.batch_size)

    if cfg.rho_mode == "batch-spearman":
        sums = np.asarray(components.in_mask_sums)  # [samples, layers]
        rho = [batch_rho(sums[:, k], components.ious) for k in range(len(layers))]
    else:
        rho = [1.0] * len(layers)
    rel = relative_rho(rho)

    w_adw = adw(_plain_l_ar(components, cfg)) if cfg.use_adw else 1.0
    if cfg.use_odw:
        w_odw = tuple(odw(r) for r in components.box_ratios)
    else:
        w_odw = (1.0,) * components.batch_size
    return LossWeights(tuple(layers), tuple(rho), tuple(rel), w_adw, w_odw)


def assemble_total(
    components: LossComponents, weights: LossWeights, cfg: AttBalanceConfig
) -> Tuple[Tensor, LossBreakdown]:
    """Combine components under fixed weights.

    Attention regularization is on exactly when ``components`` carries RAC
    terms; otherwise the total is ``alpha_1 * L_1 + alpha_g * L_giou``.
    """
    l1 = _mean(components.l1)
    lg = _mean(components.giou)
    l1_s, lg_s = _values(components.l1), _values(components.giou)
    _check_finite(l1.item(), "l_1")
    _check_finite(lg.item(), "l_giou")
    on = bool(components.rac_terms)
    n_layers = len(components.layers)

    if not on:
        total = add(scale(l1, cfg.alpha_1), scale(lg, cfg.alpha_g))
        _check_finite(total.item(), "total")
        return total, LossBreakdown(
            rac_terms=[],
            rho=[],
            rel_rho=[],
            mrc_terms=[],
            l_rac=0.0,
            l_mrc=0.0,
            l_ar=0.0,
            l_ar_plain=0.0,
            w_adw=1.0,
            w_odw=1.0,
            l_1=l1.item(),
            l_giou=lg.item(),
            total=total.item(),
            layers=list(components.layers),
            attbalance_on=False,
            w_odw_per_sample=[1.0] * components.batch_size,
            l_1_per_sample=l1_s,
            l_giou_per_sample=lg_s,
        )

    if len(weights.rel_rho) != n_layers or len(weights.w_odw) != components.batch_size:
        raise DimensionError("loss weights do not match the batch")
    rel = np.asarray(weights.rel_rho, dtype=np.float64)

    per_sample_rac = [sum_all(mul(stack_scalars(t), rel)) for t in components.rac_terms]
    l_rac = _mean(per_sample_rac) if cfg.use_rac else Tensor(0.0)
    if cfg.use_mrc and components.mrc_terms:
        l_mrc = _mean([sum_all(stack_scalars(t)) for t in components.mrc_terms])
    else:
        l_mrc = Tensor(0.0)
    _check_finite(l_rac.item(), "l_rac")
    _check_finite(l_mrc.item(), "l_mrc")
    l_ar = add(l_rac, l_mrc)

    detection = stack_scalars(
        [add(scale(a, cfg.alpha_1), scale(b, cfg.alpha_g)) for a, b in zip(components.l1, components.giou)]
    )
    weighted = mean_all(mul(detection, np.asarray(weights.w_odw, dtype=np.float64)))
    total = add(scale(l_ar, cfg.alpha_ar), scale(weighted, weights.w_adw))
    _check_finite(total.item(), "total")

    rac_by_layer = np.mean([_values(t) for t in components.rac_terms], axis=0).tolist()
    mrc_by_layer = (
        np.mean([_values(t) for t in components.mrc_terms], axis=0).tolist()
        if components.mrc_terms
        else [0.0] * n_layers
    )
    breakdown = LossBreakdown(
        rac_terms=rac_by_layer,
        rho=list(weights.rho),
        rel_rho=list(weights.rel_rho),
        mrc_terms=mrc_by_layer,
        l_rac=l_rac.item(),
        l_mrc=l_mrc.item(),
        l_ar=l_ar.item(),
        l_ar_plain=_plain_l_ar(components, cfg),
        w_adw=weights.w_adw,
        w_odw=float(np.mean(weights.w_odw)),
        l_1=l1.item(),
        l_giou=lg.item(),
        total=total.item(),
        layers=list(components.layers),
        attbalance_on=True,
        w_odw_per_sample=list(weights.w_odw),
        l_1_per_sample=l1_s,
        l_giou_per_sample=lg_s,
    )
    return total, breakdown


def attbalance_active(cfg: AttBalanceConfig, epoch: int, enabled: bool = True) -> bool:
    """Whether the regularizer applies at ``epoch``."""
    return enabled and epoch < cfg.attbalance_epochs


def total_loss(
    preds: Sequence[Tensor],
    attns: Sequence[AttentionStack],
    samples: Sequence[GroundingSample],
    cfg: AttBalanceConfig,
    epoch: int,
    attn_moms: Optional[Sequence[AttentionStack]] = None,
    enabled: bool = True,
    weights: Optional[LossWeights] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """Full training objective of one batch.

    ``weights`` may be given to hold rhos and difficulty weights fixed, as
    gradient checks do; otherwise they are computed from the batch.
    """
    on = attbalance_active(cfg, epoch, enabled)
    components = compute_components(preds, attns, samples, cfg, attn_moms, regularize=on)
    if weights is None:
        weights = compute_weights(components, cfg)
    return assemble_total(components, weights, cfg)
