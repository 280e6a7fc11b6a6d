"""Sweep planning, execution and persistence.

Output layout under ``out``::

    plan.json
    runs/<label>/<run>/runlog.jsonl    label = regime or regime-r<rank>
                       R.csv           evaluation matrix (rows = steps)
                       meta.json       parameter counts, vitality map, digests
                       checkpoints/    base, adapters or per-language models
    metrics/<label>/report.json, R_order<k>.csv, mft.csv, mbt.csv, p_avg.csv

Run n (0-based) of a sweep uses seed ``cfg.seed + n`` and, for sequential
regimes, order n. Datasets always come from ``cfg.seed``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .lora import AdapterRegistry, AdapterSet
from .metrics import RMatrix, group_by_vitality, read_matrix_csv, transfer_report
from .model import MONO, MULTI, SHARED_LORA, VANILLA, ModelConfig, count_trainable
from .orders import massive_orders, make_orders, mixed_orders, resource_weights, restrict
from .regimes import LanguageOrder, RegimeConfig, RunLog, RunResult, model_config_for, run_regime, with_seed
from .tasks import (
    LOW,
    MID,
    HIGH,
    TaskDataset,
    VocabLayout,
    generate_language,
    ingest_massive,
    load_vitality_map,
    synthetic_specs,
)

log = logging.getLogger(__name__)

SEQUENTIAL = (VANILLA, SHARED_LORA)


class MissingArtifact(FileNotFoundError):
    """An upstream file a subcommand depends on does not exist."""


class PartialSweep(RuntimeError):
    def __init__(self, missing: Sequence[str]):
        super().__init__(f"{len(missing)} run(s) missing: {', '.join(missing)}")
        self.missing = list(missing)


# -- datasets and orders ---------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> dict[str, TaskDataset]:
    d = cfg.data
    if d.source == "massive":
        vit = load_vitality_map(d.vitality_map) if d.vitality_map else None
        ds = ingest_massive(d.path, vit)
        if d.locales:
            missing = set(d.locales) - set(ds)
            if missing:
                raise ValueError(f"locales not in {d.path}: {sorted(missing)}")
            ds = {l: ds[l] for l in d.locales}
        return ds
    layout = VocabLayout(num_scripts=max(8, d.num_languages), filler_size=d.filler_size, slot_vocab=d.slot_vocab)
    specs = synthetic_specs(d.num_languages, d.overlap, d.num_families, cfg.seed, d.vitalities)
    return {
        s.lang_id: generate_language(s, tuple(d.sizes), layout, max_seq_len=cfg.model.max_seq_len)
        for s in specs
    }


def model_config(cfg: ExperimentConfig, datasets) -> ModelConfig:
    m = cfg.model
    return model_config_for(datasets, m.hidden_dim, m.max_seq_len, m.dropout_rate, m.residual_scale)


def build_orders(cfg: ExperimentConfig, datasets) -> list[LanguageOrder]:
    langs = list(datasets)
    o = cfg.orders
    if o.policy == "explicit":
        orders = [LanguageOrder(str(i + 1), tuple(x)) for i, x in enumerate(o.explicit)]
    elif o.policy == "massive":
        orders = [restrict(x, langs) for x in massive_orders()]
    elif o.policy == "mixed":
        orders = mixed_orders(langs, cfg.N, cfg.seed, resource_weights(datasets), o.destructive)
    else:
        orders = make_orders(o.policy, langs, cfg.N, cfg.seed, resource_weights(datasets), o.destructive)
    if len(orders) < cfg.N:
        raise ValueError(f"{len(orders)} orders available but N = {cfg.N}")
    orders = orders[: cfg.N]
    for x in orders:
        x.check(langs)
    return orders


# -- plan -------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    regime: str
    rank: int | None
    n: int
    seed: int
    order_id: str | None

    @property
    def label(self) -> str:
        return self.regime if self.rank is None else f"{self.regime}-r{self.rank}"

    @property
    def run_name(self) -> str:
        head = f"order{self.order_id}" if self.order_id is not None else f"run{self.n + 1}"
        return f"{head}-seed{self.seed}"

    @property
    def relpath(self) -> str:
        return f"runs/{self.label}/{self.run_name}"


def plan(cfg: ExperimentConfig, orders: Sequence[LanguageOrder]) -> list[RunSpec]:
    specs = []
    for rc in cfg.regime_configs():
        for n in range(cfg.N):
            oid = orders[n].order_id if rc.regime in SEQUENTIAL else None
            specs.append(RunSpec(rc.regime, rc.rank, n, cfg.seed + n, oid))
    return specs


def regime_config(cfg: ExperimentConfig, spec: RunSpec) -> RegimeConfig:
    for rc in cfg.regime_configs():
        if rc.regime == spec.regime and rc.rank == spec.rank:
            return with_seed(rc, spec.seed)
    raise KeyError(spec.label)


def plan_json(cfg: ExperimentConfig, orders, specs) -> str:
    body = {
        "name": cfg.name,
        "seed": cfg.seed,
        "N": cfg.N,
        "H": cfg.H,
        "orders": {o.order_id: list(o.langs) for o in orders},
        "runs": [dict(asdict(s), label=s.label, path=s.relpath) for s in specs],
    }
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


# -- running ------------------------------------------------------------------------


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _matrix_csv(log_: RunLog) -> str:
    values = np.array([[r.f1[l] for l in log_.langs] for r in log_.records])
    labels = [r.trained for r in log_.records]
    return RMatrix(log_.langs, values, log_.order_id).to_csv() if len(labels) == len(log_.langs) and log_.regime != MULTI else _rect_csv(labels, values, log_.langs)


def _rect_csv(rows, values, cols) -> str:
    lines = [",".join(["step/lang"] + list(cols))]
    for r, v in zip(rows, values):
        lines.append(",".join([r] + [repr(float(x)) for x in v]))
    return "\n".join(lines) + "\n"


def _save_checkpoints(res: RunResult, directory: Path) -> dict:
    ck = directory / "checkpoints"
    info: dict = {}
    regime = res.log.regime
    if regime == MONO:
        for lang, params in (res.models or {}).items():
            params.save(ck / "models" / lang)
        info["models"] = sorted(res.models or {})
        return info
    if res.params is not None:
        res.params.save(ck / "base")
        info["base_digest"] = res.params.digest()
    if isinstance(res.adapters, AdapterRegistry):
        for lang in res.adapters.tasks():
            res.adapters.get(lang).save(ck / "adapters" / lang, task_id=lang)
    elif isinstance(res.adapters, AdapterSet):
        res.adapters.save(ck / "adapters" / "shared", task_id=None)
    return info


def _counts(res: RunResult, regime: str, T: int) -> dict:
    if regime == MONO:
        model = next(iter((res.models or {}).values()))
        return {"trainable": count_trainable(model, None, MONO, T), "adapter_params": 0, "model_params": model.num_params}
    params = res.params
    adapters = res.adapters
    if adapters is None:
        return {"trainable": params.num_params, "adapter_params": 0, "model_params": params.num_params}
    return {
        "trainable": count_trainable(params, adapters, regime, T),
        "adapter_params": adapters.adapter_params() if isinstance(adapters, AdapterRegistry) else adapters.adapter_params,
        "model_params": params.num_params,
    }


def execute(cfg: ExperimentConfig, spec: RunSpec, out: str | Path, datasets=None, orders=None) -> dict:
    """Train one planned run and write its directory; returns the meta record."""
    datasets = datasets if datasets is not None else build_datasets(cfg)
    orders = orders if orders is not None else build_orders(cfg, datasets)
    order = next((o for o in orders if o.order_id == spec.order_id), None)
    rc = regime_config(cfg, spec)
    mc = model_config(cfg, datasets)
    res = run_regime(datasets, rc, order, mc)
    directory = Path(out) / spec.relpath
    directory.mkdir(parents=True, exist_ok=True)
    res.log.write(directory / "runlog.jsonl")
    (directory / "R.csv").write_text(_matrix_csv(res.log))
    meta = {
        "regime": spec.regime,
        "rank": spec.rank,
        "seed": spec.seed,
        "n": spec.n,
        "order_id": spec.order_id,
        "langs": res.log.langs,
        "vitality": {l: ds.spec.vitality for l, ds in datasets.items()},
        "mean_final_f1": res.log.mean_final_f1(),
        "final_f1": res.log.final_f1(),
        "regime_config": asdict(rc),
    }
    meta.update(_counts(res, spec.regime, len(datasets)))
    meta.update(_save_checkpoints(res, directory))
    (directory / "meta.json").write_text(_json(meta))
    log.info("%s %s mean final F1 %.4f", spec.label, spec.run_name, meta["mean_final_f1"])
    return meta


def _worker(args):
    cfg, spec, out = args
    try:
        return spec, execute(cfg, spec, out), None
    except Exception as exc:  # reported as a partial sweep by the caller
        return spec, None, f"{type(exc).__name__}: {exc}"


def sweep(cfg: ExperimentConfig, out: str | Path, workers: int = 1) -> tuple[list[dict], list[str]]:
    """Run the whole plan. Returns (metas, failures)."""
    out = Path(out)
    datasets = build_datasets(cfg)
    orders = build_orders(cfg, datasets)
    specs = plan(cfg, orders)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan_json(cfg, orders, specs))
    metas: list[dict] = []
    failures: list[str] = []
    if workers <= 1:
        for spec in specs:
            try:
                metas.append(execute(cfg, spec, out, datasets, orders))
            except Exception as exc:
                failures.append(f"{spec.relpath}: {type(exc).__name__}: {exc}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for spec, meta, err in pool.map(_worker, [(cfg, s, out) for s in specs]):
                if err:
                    failures.append(f"{spec.relpath}: {err}")
                else:
                    metas.append(meta)
    return metas, failures


# -- reading a sweep back ---------------------------------------------------------


def read_plan(out: str | Path) -> dict:
    p = Path(out) / "plan.json"
    if not p.exists():
        raise MissingArtifact(f"{p} not found; run `sweep` first")
    return json.loads(p.read_text())


def load_runs(out: str | Path) -> tuple[list[dict], list[str]]:
    """(metas of completed runs in plan order, relpaths of missing runs)."""
    out = Path(out)
    pl = read_plan(out)
    metas, missing = [], []
    for r in pl["runs"]:
        d = out / r["path"]
        if (d / "meta.json").exists() and (d / "runlog.jsonl").exists():
            meta = json.loads((d / "meta.json").read_text())
            meta["label"] = r["label"]
            meta["path"] = r["path"]
            metas.append(meta)
        else:
            missing.append(r["path"])
    return metas, missing


def collect_metrics(out: str | Path, H: int | None = None) -> tuple[dict[str, dict], list[str]]:
    """Transfer reports for every sequential regime label; writes ``metrics/``."""
    out = Path(out)
    pl = read_plan(out)
    H = pl["H"] if H is None else H
    metas, missing = load_runs(out)
    reports: dict[str, dict] = {}
    by_label: dict[str, list[RMatrix]] = {}
    for m in metas:
        if m["regime"] not in SEQUENTIAL:
            continue
        rl = RunLog.read(out / m["path"] / "runlog.jsonl")
        by_label.setdefault(m["label"], []).append(rl.r_matrix())
    for label, mats in by_label.items():
        rep = transfer_report(mats, H, regime=label)
        d = out / "metrics" / label
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(rep.to_json())
        for R in mats:
            (d / f"R_order{R.order_id}.csv").write_text(R.to_csv())
        langs = sorted(mats[0].langs)
        for name, table in (("mft", rep.mft), ("mbt", rep.mbt)):
            (d / f"{name}.csv").write_text(_hop_csv(table, langs))
        (d / "p_avg.csv").write_text(_rect_csv(["p_avg"], [[rep.p_avg.get(l, float("nan")) for l in langs]], langs))
        reports[label] = json.loads(rep.to_json())
    return reports, missing


def _hop_csv(table: dict, langs: list[str]) -> str:
    rows, values = [], []
    for h in sorted(table):
        per = table[h]["per_language"]
        if not per:
            continue
        rows.append(str(h))
        values.append([per.get(l, float("nan")) for l in langs])
    return _rect_csv(rows, values, langs)


# -- parameter / F1 table -----------------------------------------------------------

TABLE_COLUMNS = ("regime", "rank", "trainable", "adapter_params", "mean_f1", LOW, MID, HIGH, "runs")
EMPTY = "n/a"


def summarize(metas: Sequence[dict]) -> list[dict]:
    """One row per regime label: counts, mean final F1 and per-vitality means over runs."""
    rows: dict[str, dict] = {}
    for m in metas:
        label = m.get("label") or (m["regime"] if m["rank"] is None else f"{m['regime']}-r{m['rank']}")
        row = rows.setdefault(
            label,
            {"regime": m["regime"], "rank": m["rank"], "trainable": m["trainable"],
             "adapter_params": m["adapter_params"], "_f1": [], "_groups": []},
        )
        row["_f1"].append(m["mean_final_f1"])
        row["_groups"].append(group_by_vitality(m["final_f1"], m["vitality"]))
    out = []
    for label, row in rows.items():
        groups = {}
        for g in (LOW, MID, HIGH):
            vals = [x[g] for x in row["_groups"] if x[g] is not None]
            groups[g] = float(np.mean(vals)) if vals else None
        out.append({
            "label": label,
            "regime": row["regime"],
            "rank": row["rank"],
            "trainable": row["trainable"],
            "adapter_params": row["adapter_params"],
            "mean_f1": float(np.mean(row["_f1"])),
            **groups,
            "runs": len(row["_f1"]),
        })
    return out


def _cell(v) -> str:
    if v is None:
        return EMPTY
    if isinstance(v, float):
        return f"{100 * v:.2f}"
    return str(v)


def table_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_cell(r[c]) if c != "rank" else (EMPTY if r[c] is None else str(r[c])) for c in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def table_text(rows: Sequence[dict]) -> str:
    cells = [list(TABLE_COLUMNS)]
    for r in rows:
        cells.append([_cell(r[c]) if c != "rank" else (EMPTY if r[c] is None else str(r[c])) for c in TABLE_COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def read_matrix(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} not found")
    return read_matrix_csv(p.read_text())
