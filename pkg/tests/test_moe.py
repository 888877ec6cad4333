import numpy as np
import pytest

from saresdet import tensor as T
from saresdet.experts import ExpertKind, zero_merge
from saresdet.moe import (ABLATION_LABELS, DEFAULT_ROSTERS, LevelBankConfig, SparseMoE, ablation_bank,
                          sares_moe_forward, usage_table)
from saresdet.router import gate
from saresdet.tensor import Tape, Tensor


def oracle_output(moe: SparseMoE, x: Tensor, decision) -> np.ndarray:
    """Run every expert on the full batch, then keep only the selected weighted terms."""
    with T.no_grad():
        shared = moe.shared(x).data.astype(np.float64)
        outs = [o.data.astype(np.float64) for o in moe.evaluate_all(x)]
    w = decision.weights.data * decision.mask
    return shared + sum(w[:, e, None, None, None] * outs[e] for e in range(len(outs)))


def make(level="P3", k=2, variant="dual_branch", channels=8, seed=0):
    bank = LevelBankConfig(level, DEFAULT_ROSTERS[level], k=k, variant=variant)
    return SparseMoE(channels, bank, np.random.default_rng(seed))


def test_default_rosters():
    assert DEFAULT_ROSTERS["P3"] == ("wavelet", "wavelet", "spatial", "spatial")
    assert DEFAULT_ROSTERS["P4"] == DEFAULT_ROSTERS["P5"] == ("frequency", "frequency", "hybrid", "hybrid")


@pytest.mark.parametrize("level", ["P3", "P4", "P5"])
def test_counter_and_oracle(level, rng):
    moe = make(level)
    x = Tensor(rng.normal(size=(3, 8, 8, 8)).astype(np.float32))
    y, dec = moe(x)
    assert moe.stats.counts.sum() == 2 * 3 and moe.stats.forwards == 1
    assert y.shape == x.shape
    assert np.abs(y.data - oracle_output(moe, x, dec)).max() < 1e-5


def test_single_image_two_experts_ran(rng):
    moe = make("P4")
    moe(Tensor(rng.normal(size=(1, 8, 4, 4)).astype(np.float32)))
    assert (moe.stats.counts > 0).sum() == 2 and moe.stats.counts.sum() == 2


def test_uniform_runs_all_and_matches_k_equals_e(rng):
    x = Tensor(rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
    uni = make("P3", k=4, variant="uniform")
    y, _ = uni(x)
    assert uni.stats.counts.tolist() == [2, 2, 2, 2]
    forced = uni.combine(x, gate(Tensor(np.zeros((2, 4))), 1.0, 4))
    assert np.abs(forced.data - y.data).max() < 1e-6


def test_identity_experts_give_shared_plus_x(rng):
    moe = make("P5")
    for e in moe.experts:
        zero_merge(e)
    x = Tensor(rng.normal(size=(2, 8, 2, 2)).astype(np.float32))
    y, _ = moe(x)
    with T.no_grad():
        expected = moe.shared(x).data + x.data
    assert np.abs(y.data - expected).max() < 1e-6


def test_linearity_in_weights(rng):
    moe = make("P3")
    x = Tensor(rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
    dec = moe.router(x)
    with T.no_grad():
        shared = moe.shared(x).data
        y1 = moe.combine(x, dec).data
        dec.weights = Tensor(dec.weights.data * 2)
        y2 = moe.combine(x, dec).data
    assert np.abs((y2 - shared) - 2 * (y1 - shared)).max() < 1e-5


@pytest.mark.parametrize("variant", ["mlp", "frequency_only", "spatial_only", "dual_branch"])
def test_router_receives_gradient(variant, rng):
    moe = make("P3", variant=variant)
    x = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32))
    with Tape() as tape:
        y, _ = moe(x)
        loss = T.total(T.square(y))
    tape.backward(loss)
    assert np.linalg.norm(moe.router.w_r.grad) > 0


def test_moe_gradient_64bit(rng):
    with T.precision("float64"):
        moe = make("P4", channels=4, seed=2)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)))
        f = lambda xx: T.total(T.square(moe(xx)[0]))
        # keep the same routing for every perturbation: finite steps are tiny
        assert T.grad_rel_error(T.analytic_grad(f, x), T.finite_diff_grad(f, x)) < 1e-4


def test_usage_table(rng):
    moe = make("P3")
    moe(Tensor(rng.normal(size=(5, 8, 8, 8)).astype(np.float32)))
    table = usage_table(moe.stats)
    assert table["counts"].sum() == 10
    used = table["counts"] > 0
    assert np.all((table["mean_weight"][used] > 0) & (table["mean_weight"][used] <= 1))


def test_sares_moe_forward_checks_roster(rng):
    moe = make("P3")
    other = LevelBankConfig("P4", DEFAULT_ROSTERS["P4"])
    with pytest.raises(ValueError):
        sares_moe_forward(Tensor(np.zeros((1, 8, 4, 4))), other, moe)


class TestAblationBanks:
    def test_shared_only(self):
        banks = ablation_bank("SharedExpert Only")
        assert all(set(b.roster) == {ExpertKind.SHARED} for b in banks.values())

    def test_single_level_rows(self):
        banks = ablation_bank("P3: Wavelet Expert Only")
        assert banks["P3"].roster == (ExpertKind.WAVELET,) * 4
        assert banks["P4"].roster == DEFAULT_ROSTERS["P4"] and banks["P5"].roster == DEFAULT_ROSTERS["P5"]
        assert ablation_bank("p5_hybrid")["P5"].roster == (ExpertKind.HYBRID,) * 4

    def test_full(self):
        banks = ablation_bank("Full SARESMoE")
        assert {lvl: b.roster for lvl, b in banks.items()} == DEFAULT_ROSTERS

    def test_eight_rows(self):
        assert len(ABLATION_LABELS) == 8
        for key, label in ABLATION_LABELS.items():
            assert ablation_bank(label) == ablation_bank(key)

    def test_unknown(self):
        with pytest.raises(ValueError):
            ablation_bank("P6: everything")
