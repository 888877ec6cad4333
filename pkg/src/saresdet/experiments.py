"""Ablation grids and a single train-then-evaluate run."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

from .config import ModelConfig, TrainConfig
from .detection.train import Dataset, evaluate, train
from .metrics import EvalResult
from .moe import ABLATION_LABELS, LEVELS
from .router import RouterVariant

CSV_FIELDS = ("config_id", "map50", "map5095", "ap_small", "precision", "recall", "seed")


@dataclass(frozen=True)
class AblationRow:
    config_id: str
    overrides: dict

    def config(self, base: ModelConfig, seed: int) -> ModelConfig:
        return replace(base, **self.overrides, seed=seed)


def _moe(levels: str) -> tuple[str, ...]:
    return tuple(levels.split("+")) if levels != "none" else ()


def _table2() -> list[AblationRow]:
    # MoE stages are added incrementally, with and without SDEP
    rows = []
    for sdep in ("off", "on"):
        for stages in ("none", "P3", "P3+P4", "P3+P4+P5"):
            rows.append(AblationRow(f"sdep={sdep};moe={stages}",
                                    {"fusion": "spd" if sdep == "on" else "none", "moe_levels": _moe(stages)}))
    return rows


def _table3() -> list[AblationRow]:
    full = {"fusion": "spd", "moe_levels": LEVELS}
    return [AblationRow(f"router={v.value}", {**full, "router": v.value}) for v in RouterVariant]


def _table5() -> list[AblationRow]:
    return [AblationRow(f"fusion={f}", {"fusion": f, "moe_levels": LEVELS}) for f in ("none", "strided", "strip", "spd")]


def _table6() -> list[AblationRow]:
    return [AblationRow(f"experts={key}", {"fusion": "none", "moe_levels": LEVELS, "experts": key}) for key in ABLATION_LABELS]


SUITES = {"table2": _table2, "table3": _table3, "table5": _table5, "table6": _table6}


def suite_rows(name: str) -> list[AblationRow]:
    if name not in SUITES:
        raise ValueError(f"unknown ablation suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()


@dataclass
class RunResult:
    config_id: str
    seed: int
    result: EvalResult
    seconds: float
    history: list[dict]
    model: object = None

    def csv_row(self) -> dict:
        r = self.result
        return {"config_id": self.config_id, "map50": r.map50, "map5095": r.map5095, "ap_small": r.ap_small,
                "precision": r.precision, "recall": r.recall, "seed": self.seed}


def run_config(config: ModelConfig, tcfg: TrainConfig, train_set: Dataset, val_set: Dataset,
               config_id: str = "", emit=None, keep_model: bool = False) -> RunResult:
    start = time.perf_counter()
    model, history = train(train_set, config, tcfg, emit=emit)
    result = evaluate(model, val_set)
    return RunResult(config_id, config.seed, result, time.perf_counter() - start, history, model if keep_model else None)


def run_suite(name: str, base: ModelConfig, tcfg: TrainConfig, train_set: Dataset, val_set: Dataset,
              seeds, on_result=None) -> list[RunResult]:
    out = []
    for seed in seeds:
        for row in suite_rows(name):
            res = run_config(row.config(base, seed), replace(tcfg, seed=seed), train_set, val_set, row.config_id)
            out.append(res)
            if on_result is not None:
                on_result(res)
    return out


def format_csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow({k: format_csv_value(v) for k, v in r.csv_row().items()})
    return buf.getvalue()
