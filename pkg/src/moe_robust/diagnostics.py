"""Routing-collapse reports, fixed-expert sweeps, robustness/accuracy tables
and cost curves.  Every report can be written as JSON lines and as a
tab-separated table, each starting with a schema header line."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch.nn as nn

from .attacks import AttackConfig, evaluate
from .data import Dataset
from .errors import ConflictError, InvalidArgument
from .models import ModelConfig, ReplacementSpec, build_model, count_cost
from .moe import MoELayerConfig, fix_expert, moe_layers
from .numerics import atomic_write_bytes
from .training import routing_snapshot

SCHEMA_VERSION = 1


def entropy_nats(weights: Sequence[float]) -> float:
    total = float(sum(weights))
    if total <= 0:
        return 0.0
    return -sum((w / total) * math.log(w / total) for w in weights if w > 0)


@dataclass
class LayerRouting:
    layer: str
    counts: list[int]
    importance: list[float]
    entropy: float  # of normalized importance mass, nats
    count_entropy: float  # of top-1 assignment counts, nats
    dead: list[int]

    @property
    def n_experts(self) -> int:
        return len(self.counts)


@dataclass
class RoutingReport:
    dataset_size: int
    layers: list[LayerRouting]

    def layer(self, name: str) -> LayerRouting:
        for lr in self.layers:
            if lr.layer == name:
                return lr
        raise KeyError(name)

    def rows(self) -> list[dict]:
        return [asdict(lr) for lr in self.layers]


def report_from_snapshot(importance: dict[str, list[float]], counts: dict[str, list[int]],
                         dead_fraction: float = 0.0) -> RoutingReport:
    layers = []
    size = 0
    for name, c in counts.items():
        size = int(sum(c))
        limit = dead_fraction * size
        dead = [i for i, v in enumerate(c) if (v == 0 if dead_fraction == 0 else v <= limit)]
        imp = importance[name]
        layers.append(LayerRouting(name, list(c), list(imp), entropy_nats(imp), entropy_nats(c), dead))
    return RoutingReport(size, layers)


def routing_report(model: nn.Module, dataset: Dataset, dead_fraction: float = 0.0,
                   batch_size: int = 256) -> RoutingReport:
    """Eval-mode routing statistics of every MoE layer over ``dataset``.

    An expert is dead when it receives no top-1 assignment at all (or at most
    ``dead_fraction`` of the inputs when that is positive).
    """
    if not moe_layers(model):
        raise InvalidArgument("routing report needs a model with at least one MoE layer")
    importance, counts = routing_snapshot(model, dataset, batch_size)
    return report_from_snapshot(importance, counts, dead_fraction)


@dataclass
class FixedExpertTable:
    gated_accuracy: float
    rows: list[dict] = field(default_factory=list)  # {"layer", "expert", "accuracy"}

    def accuracies(self, layer: str) -> list[float]:
        return [r["accuracy"] for r in self.rows if r["layer"] == layer]


def fixed_expert_sweep(model: nn.Module, dataset: Dataset, attack: AttackConfig | None = None,
                       seed: int = 0, batch_size: int = 256) -> FixedExpertTable:
    """Accuracy with each MoE layer forced onto each single expert, one layer at
    a time, next to the accuracy of the untouched gated model."""
    layers = moe_layers(model)
    if not layers:
        raise InvalidArgument("fixed-expert sweep needs a model with at least one MoE layer")
    table = FixedExpertTable(evaluate(model, dataset, attack, batch_size, seed))
    for name, layer in layers:
        for i in range(layer.n_experts):
            work = copy.deepcopy(model)
            fix_expert(dict(moe_layers(work))[name], i)
            table.rows.append({"layer": name, "expert": i,
                               "accuracy": evaluate(work, dataset, attack, batch_size, seed)})
    return table


@dataclass
class TradeoffPoint:
    model_id: str
    regime: str  # "normal" | "adversarial"
    clean_accuracy: float
    attacked: dict[str, float]
    config_digest: str

    def __post_init__(self):
        for v in [self.clean_accuracy, *self.attacked.values()]:
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"accuracy {v} outside [0, 1] for {self.model_id}")


def merge_points(points: Iterable[TradeoffPoint]) -> list[TradeoffPoint]:
    """Merge rows of the same model (same digest); sorted by model id."""
    merged: dict[str, TradeoffPoint] = {}
    for p in points:
        have = merged.get(p.model_id)
        if have is None:
            merged[p.model_id] = TradeoffPoint(p.model_id, p.regime, p.clean_accuracy, dict(p.attacked), p.config_digest)
            continue
        if have.config_digest != p.config_digest:
            raise ConflictError(
                f"model id {p.model_id!r} appears with digests {have.config_digest} and {p.config_digest}"
            )
        for name, acc in p.attacked.items():
            if name in have.attacked and have.attacked[name] != acc:
                raise ConflictError(f"{p.model_id!r}: conflicting accuracies for attack {name!r}")
            have.attacked[name] = acc
    return [merged[k] for k in sorted(merged)]


def tradeoff_report(points: Sequence[TradeoffPoint], out: str | Path | None = None) -> list[dict]:
    if not points:
        raise InvalidArgument("tradeoff report needs at least one point")
    merged = merge_points(points)
    attacks = sorted({a for p in merged for a in p.attacked})
    rows = []
    for p in merged:
        row = {"model_id": p.model_id, "regime": p.regime, "clean_accuracy": p.clean_accuracy}
        for a in attacks:
            row[f"acc_{a}"] = p.attacked.get(a)
        row["config_digest"] = p.config_digest
        rows.append(row)
    if out is not None:
        write_table(out, "tradeoff", rows)
    return rows


@dataclass
class CostRow:
    n_experts: int
    k: int
    parameters: int
    flops_per_input: int


def _resolve_k(k, n: int) -> int:
    if isinstance(k, int):
        return k
    text = str(k).replace(" ", "")
    if text == "N":
        return n
    if text == "N/2":
        return max(n // 2, 1)
    return int(text)


def cost_curve(arch: str, expert_kind: str, expert_counts: Sequence[int], ks: Sequence,
               stage: str = "conv5_x", block_index=1, conv_index=None, gate_kind: str = "gap_fc",
               num_classes: int = 100, input_shape=(3, 32, 32)) -> list[CostRow]:
    """One cost row per (N, k); ``ks`` may hold ints or the strings "N" / "N/2"."""
    if expert_kind == "conv" and conv_index is None:
        conv_index = 1
    rows = []
    for n in expert_counts:
        moe = MoELayerConfig(n_experts=n, top_k=1, gate_kind=gate_kind, expert_kind=expert_kind)
        rep = ReplacementSpec(stage, block_index, conv_index if expert_kind == "conv" else None, moe)
        model = build_model(ModelConfig(arch, num_classes, [rep], tuple(input_shape)), seed=0)
        for k in ks:
            kk = _resolve_k(k, n)
            rep_ = count_cost(model, kk, input_shape)
            rows.append(CostRow(n, kk, rep_.parameters, rep_.flops_per_input))
    return rows


# -- writers -------------------------------------------------------------------


def write_table(out: str | Path, schema: str, rows: Sequence[dict]) -> tuple[Path, Path]:
    """Write ``<out>.jsonl`` and ``<out>.tsv``; both start with a schema header."""
    out = Path(out)
    if out.suffix in (".jsonl", ".tsv"):
        out = out.with_suffix("")
    header = {"schema": schema, "version": SCHEMA_VERSION}
    jl = io.StringIO()
    jl.write(json.dumps(header, sort_keys=True) + "\n")
    for r in rows:
        jl.write(json.dumps(r, sort_keys=True) + "\n")
    cols = list(rows[0].keys()) if rows else []
    tsv = io.StringIO()
    tsv.write(f"# schema={schema} version={SCHEMA_VERSION}\n")
    w = csv.writer(tsv, delimiter="\t", lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([json.dumps(r[c]) if isinstance(r[c], (list, dict)) else r[c] for c in cols])
    jpath, tpath = out.with_suffix(".jsonl"), out.with_suffix(".tsv")
    atomic_write_bytes(jpath, jl.getvalue().encode())
    atomic_write_bytes(tpath, tsv.getvalue().encode())
    return jpath, tpath


def read_table(path: str | Path) -> tuple[dict, list[dict]]:
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines:
        raise InvalidArgument(f"{path} is empty")
    return json.loads(lines[0]), [json.loads(l) for l in lines[1:]]


def routing_rows(report: RoutingReport) -> list[dict]:
    return [dict(r, dataset_size=report.dataset_size) for r in report.rows()]


def fixed_expert_rows(table: FixedExpertTable) -> list[dict]:
    rows = [{"layer": "gated", "expert": -1, "accuracy": table.gated_accuracy}]
    rows.extend(table.rows)
    return rows


def cost_rows(rows: Sequence[CostRow]) -> list[dict]:
    return [asdict(r) for r in rows]
