"""Shared + sparse mixture-of-experts layer with scale-aware expert rosters."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .experts import ExpertKind, SharedExpert, make_expert
from .router import Router, RouterDecision, RouterVariant
from .tensor import Module, Tensor

LEVELS = ("P3", "P4", "P5")

DEFAULT_ROSTERS = {
    "P3": (ExpertKind.WAVELET, ExpertKind.WAVELET, ExpertKind.SPATIAL, ExpertKind.SPATIAL),
    "P4": (ExpertKind.FREQUENCY, ExpertKind.FREQUENCY, ExpertKind.HYBRID, ExpertKind.HYBRID),
    "P5": (ExpertKind.FREQUENCY, ExpertKind.FREQUENCY, ExpertKind.HYBRID, ExpertKind.HYBRID),
}


@dataclass(frozen=True)
class LevelBankConfig:
    level: str
    roster: tuple[ExpertKind, ...]
    k: int = 2
    tau: float = 1.0
    variant: RouterVariant = RouterVariant.DUAL_BRANCH

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        object.__setattr__(self, "roster", tuple(ExpertKind(r) for r in self.roster))
        object.__setattr__(self, "variant", RouterVariant.parse(self.variant))
        if not 1 <= self.k <= len(self.roster):
            raise ValueError(f"k={self.k} out of range for {len(self.roster)} experts")


# Single-expert rows name one level; every other level keeps the default roster.
ABLATION_BANKS = {
    "shared_only": None,
    "p3_spatial": ("P3", ExpertKind.SPATIAL),
    "p3_wavelet": ("P3", ExpertKind.WAVELET),
    "p4_frequency": ("P4", ExpertKind.FREQUENCY),
    "p4_hybrid": ("P4", ExpertKind.HYBRID),
    "p5_frequency": ("P5", ExpertKind.FREQUENCY),
    "p5_hybrid": ("P5", ExpertKind.HYBRID),
    "full": (),
}

ABLATION_LABELS = {
    "shared_only": "SharedExpert Only",
    "p3_spatial": "P3: Spatial Expert Only",
    "p3_wavelet": "P3: Wavelet Expert Only",
    "p4_frequency": "P4: Frequency Expert Only",
    "p4_hybrid": "P4: Hybrid Expert Only",
    "p5_frequency": "P5: Frequency Expert Only",
    "p5_hybrid": "P5: Hybrid Expert Only",
    "full": "Full SARESMoE (Proposed)",
}


def canonical_bank_name(name: str) -> str:
    if name in ABLATION_BANKS:
        return name
    for key, label in ABLATION_LABELS.items():
        if name == label or (key == "full" and name.startswith("Full SARESMoE")):
            return key
    raise ValueError(f"unknown expert configuration {name!r}; choose from {sorted(ABLATION_BANKS)}")


def ablation_bank(config_name: str, k: int = 2, tau: float = 1.0, variant="dual_branch") -> dict[str, LevelBankConfig]:
    """Per-level rosters for one row of the expert-composition ablation."""
    key = canonical_bank_name(config_name)
    rosters = dict(DEFAULT_ROSTERS)
    spec = ABLATION_BANKS[key]
    if spec is None:
        rosters = {lvl: (ExpertKind.SHARED,) * len(r) for lvl, r in rosters.items()}
    elif spec:
        level, kind = spec
        rosters[level] = (kind,) * len(rosters[level])
    return {lvl: LevelBankConfig(lvl, rosters[lvl], k, tau, variant) for lvl in LEVELS}


@dataclass
class MoeStats:
    counts: np.ndarray
    weight_sums: np.ndarray
    forwards: int = 0
    images: int = 0
    decisions: list[RouterDecision] = field(default_factory=list)
    keep_decisions: bool = False

    @classmethod
    def empty(cls, num_experts: int) -> "MoeStats":
        return cls(np.zeros(num_experts, dtype=np.int64), np.zeros(num_experts))

    def reset(self) -> None:
        self.counts[:] = 0
        self.weight_sums[:] = 0.0
        self.forwards = 0
        self.images = 0
        self.decisions.clear()


class SparseMoE(Module):
    """``Y = shared(X) + sum_{e in T} w_e * E_e(X)``; only selected experts run."""

    def __init__(self, channels: int, bank: LevelBankConfig, rng: np.random.Generator):
        self.bank = bank
        self.shared = SharedExpert(channels, rng)
        self.experts = [make_expert(kind, channels, rng) for kind in bank.roster]
        self.router = Router(channels, len(bank.roster), bank.variant, bank.k, bank.tau, rng)
        self._stats = MoeStats.empty(len(bank.roster))

    @property
    def stats(self) -> MoeStats:
        return self._stats

    def __call__(self, x: Tensor) -> tuple[Tensor, RouterDecision]:
        decision = self.router(x)
        return self.combine(x, decision), decision

    def combine(self, x: Tensor, decision: RouterDecision) -> Tensor:
        n = x.shape[0]
        mask = decision.mask
        out = self.shared(x)
        for e, expert in enumerate(self.experts):
            rows = np.flatnonzero(mask[:, e])
            if rows.size == 0:
                continue
            xe = x if rows.size == n else T.index(x, rows)
            ye = expert(xe)
            we = T.index(decision.weights, (rows, np.full(rows.size, e)))
            contrib = T.scale_samples(ye, we)
            if rows.size != n:
                contrib = T.embed(contrib, rows, x.shape)
            out = T.add(out, contrib)
            self._stats.counts[e] += rows.size
            self._stats.weight_sums[e] += float(decision.weights.data[rows, e].sum())
        self._stats.forwards += 1
        self._stats.images += n
        if self._stats.keep_decisions:
            self._stats.decisions.append(decision)
        return out

    def evaluate_all(self, x: Tensor) -> list[Tensor]:
        """Every sparse expert on the full batch (oracle path; bypasses the counter)."""
        return [expert(x) for expert in self.experts]


def sares_moe_forward(x: Tensor, bank: LevelBankConfig, params: SparseMoE) -> tuple[Tensor, RouterDecision]:
    if params.bank.roster != bank.roster:
        raise ValueError("parameters were built for a different roster")
    return params(x)


def usage_table(stats: MoeStats) -> dict[str, np.ndarray]:
    counts = stats.counts.astype(np.float64)
    mean_w = np.divide(stats.weight_sums, counts, out=np.zeros_like(counts), where=counts > 0)
    return {"counts": stats.counts.copy(), "mean_weight": mean_w}


def with_variant(bank: LevelBankConfig, variant) -> LevelBankConfig:
    return replace(bank, variant=RouterVariant.parse(variant))

