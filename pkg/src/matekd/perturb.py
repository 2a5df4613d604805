"""Discrete-differentiable text perturbation.

The pipeline is: randomly mask content tokens, run the generator on the
masked ids, add Gumbel noise to its log-probabilities, take a temperature
softmax, then snap each sampled row to a one-hot with a straight-through
(pass-through) gradient and splice the rows back into the original
sequence. The result carries a hard token-id view for logits-only models
and a relaxed row view through which gradients reach the generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import SPECIAL_TOKENS, MASK_ID, TokenSequence

UNIFORM_EPS = 1e-10


class PerturbError(ValueError):
    """Raised on invalid masking or sampling arguments."""


@dataclass(frozen=True)
class MaskPlan:
    """Which positions of a sequence were replaced by the mask token."""

    positions: tuple[int, ...]
    rho: float
    seed: int | None = None

    def __post_init__(self):
        if list(self.positions) != sorted(set(self.positions)):
            raise PerturbError("mask positions must be sorted and unique")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class GumbelSample:
    """Gumbel(0,1) noise plus the softmax temperature it will be used with."""

    g: torch.Tensor
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise PerturbError("tau must be > 0")
        if not torch.isfinite(self.g).all():
            raise PerturbError("gumbel noise must be finite")


@dataclass
class RelaxedSequence:
    """Per-position distributions over the vocabulary plus a hard id view.

    Non-masked rows are exact one-hots of the original tokens and carry no
    gradient; rows at ``mask_positions`` are straight-through samples.
    """

    rows: torch.Tensor          # (L, K), each row sums to 1
    hard_ids: torch.Tensor      # (L,) long
    mask_positions: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return self.rows.shape[0]


def mask_tokens(seq: TokenSequence, rho: float, rng: torch.Generator,
                seed: int | None = None) -> tuple[TokenSequence, MaskPlan]:
    """Independently mask each maskable position with probability rho.

    Special positions never change. If rho > 0 selects nothing, one
    maskable position is forced so the pseudo sample always differs.
    """
    if not 0.0 <= rho <= 1.0:
        raise PerturbError(f"rho must be in [0, 1], got {rho}")
    maskable = seq.maskable_positions
    chosen: list[int] = []
    if rho > 0.0 and maskable:
        draws = torch.rand(len(maskable), generator=rng)
        chosen = [p for p, u in zip(maskable, draws.tolist()) if u < rho]
        if not chosen:
            pick = int(torch.randint(len(maskable), (1,), generator=rng).item())
            chosen = [maskable[pick]]
    ids = list(seq.ids)
    for p in chosen:
        ids[p] = MASK_ID
    masked = TokenSequence(ids=ids, segment_ids=list(seq.segment_ids),
                           maskable=list(seq.maskable))
    return masked, MaskPlan(positions=tuple(chosen), rho=rho, seed=seed)


def sample_gumbel(shape, rng: torch.Generator, tau: float = 1.0,
                  dtype: torch.dtype = torch.float32) -> GumbelSample:
    """Draw Gumbel(0,1) noise as -log(-log(u)), u clamped away from {0,1}."""
    u = torch.rand(shape, generator=rng, dtype=dtype)
    u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return GumbelSample(g=-torch.log(-torch.log(u)), tau=tau)


def gumbel_softmax(logits: torch.Tensor, g: torch.Tensor, tau: float) -> torch.Tensor:
    """softmax((log_softmax(logits) + g) / tau) along the last dimension.

    Logits are normalized to log-probabilities first, so with g = 0 and
    tau = 1 this reproduces the generator's softmax exactly.
    """
    if tau <= 0:
        raise PerturbError(f"tau must be > 0, got {tau}")
    return F.softmax((F.log_softmax(logits, dim=-1) + g) / tau, dim=-1)


def straight_through(relaxed: torch.Tensor) -> torch.Tensor:
    """Snap distributions to one-hots, passing gradients through unchanged.

    Forward value is the exact one-hot at the argmax (ties to the lowest
    id); the backward Jacobian is the identity, so downstream gradients
    reach the relaxed input as-is.
    """
    idx = relaxed.argmax(dim=-1)
    hard = F.one_hot(idx, num_classes=relaxed.shape[-1]).to(relaxed.dtype)
    return (hard - relaxed).detach() + relaxed


def assemble_pseudo(original: TokenSequence, plan: MaskPlan,
                    sampled_rows: torch.Tensor) -> RelaxedSequence:
    """Splice straight-through rows into one-hots of the original sequence.

    ``sampled_rows`` must hold one row per plan position. Non-masked rows
    are constants; gradients flow only through the sampled rows.
    """
    if sampled_rows.ndim != 2 or sampled_rows.shape[0] != len(plan):
        raise PerturbError(
            f"need {len(plan)} sampled rows, got shape {tuple(sampled_rows.shape)}")
    k = sampled_rows.shape[1]
    ids = torch.tensor(original.ids, dtype=torch.long)
    base = F.one_hot(ids, num_classes=k).to(sampled_rows.dtype)
    if not plan.positions:
        return RelaxedSequence(rows=base, hard_ids=ids, mask_positions=())
    pos = torch.tensor(plan.positions, dtype=torch.long)
    placed = torch.zeros_like(base)
    placed[pos] = sampled_rows
    keep = torch.ones(len(original), dtype=torch.bool)
    keep[pos] = False
    rows = torch.where(keep.unsqueeze(-1), base, placed)
    hard = ids.clone()
    hard[pos] = sampled_rows.detach().argmax(dim=-1)
    return RelaxedSequence(rows=rows, hard_ids=hard, mask_positions=plan.positions)


@dataclass
class PseudoBatch:
    """Batched pseudo samples: relaxed rows, hard ids and the mask layout."""

    rows: torch.Tensor            # (B, L, K)
    hard_ids: torch.Tensor        # (B, L) long
    mask_bool: torch.Tensor       # (B, L) bool
    plans: list[MaskPlan]

    @property
    def num_masked(self) -> int:
        return int(self.mask_bool.sum().item())


def mask_batch(ids: torch.Tensor, maskable: torch.Tensor, rho: float,
               rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, list[MaskPlan]]:
    """Apply mask_tokens row-wise over a padded id batch."""
    masked = ids.clone()
    mask_bool = torch.zeros_like(maskable)
    plans = []
    for b in range(ids.shape[0]):
        seq = TokenSequence(ids=ids[b].tolist(),
                            segment_ids=[0] * ids.shape[1],
                            maskable=maskable[b].tolist())
        mseq, plan = mask_tokens(seq, rho, rng)
        plans.append(plan)
        if plan.positions:
            pos = torch.tensor(plan.positions, dtype=torch.long)
            masked[b, pos] = MASK_ID
            mask_bool[b, pos] = True
    return masked, mask_bool, plans


def generate_pseudo_batch(generator, ids: torch.Tensor, maskable: torch.Tensor,
                          rho: float, tau: float, rng: torch.Generator,
                          noise: GumbelSample | None = None,
                          content_only: bool = True) -> PseudoBatch:
    """Full mask -> generate -> Gumbel -> straight-through -> splice pass.

    With ``content_only`` the five special tokens are excluded from the
    sampled rows (their logits are floored), so pseudo text stays
    decodable token-for-token against the original.
    """
    masked_ids, mask_bool, plans = mask_batch(ids, maskable, rho, rng)
    logits = generator(masked_ids)
    if content_only:
        logits = logits.clone()
        logits[..., : len(SPECIAL_TOKENS)] = torch.finfo(logits.dtype).min
    if noise is None:
        noise = sample_gumbel(logits.shape, rng, tau, dtype=logits.dtype)
    relaxed = gumbel_softmax(logits, noise.g, noise.tau)
    st = straight_through(relaxed)
    base = F.one_hot(ids, num_classes=logits.shape[-1]).to(st.dtype)
    rows = torch.where(mask_bool.unsqueeze(-1), st, base)
    hard = torch.where(mask_bool, st.detach().argmax(dim=-1), ids)
    return PseudoBatch(rows=rows, hard_ids=hard, mask_bool=mask_bool, plans=plans)
