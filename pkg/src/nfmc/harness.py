"""Experiment configs, budgeted runs, result files and rank reports."""

from __future__ import annotations

import csv
import glob as globlib
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, DegenerateRanks, InputError, MomentsUnavailable, NFMCError
from .flows import build_flow, load_checkpoint
from .flows.build import ARCHITECTURES, EXTRA_ARCHITECTURES, resolve_hyperparameters
from .metrics import RankTable, aggregate_ranks, squared_bias
from .samplers import FLOW_KINDS, KINDS, Budget, SamplerConfig, run_sampler
from .targets import FAMILIES, POSTERIOR_FAMILIES, build_target, load_dataset

SUMMARY_COLUMNS = ("target", "sampler", "flow", "hyperparam_id", "seed", "b2",
                   "accept_local", "accept_jump", "warmup_s", "sampling_s",
                   "param_count")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TargetSpec(_Strict):
    family: str
    dim: Optional[int] = Field(default=None, ge=1)
    seed: Optional[int] = None
    scale: Optional[float] = Field(default=None, gt=0)
    means: Optional[list[list[float]]] = None
    stds: Optional[list[float]] = None
    weights: Optional[list[float]] = None
    dataset: Optional[str] = None
    reference: Optional[str] = None

    @model_validator(mode="after")
    def _known(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown target family {self.family!r}")
        if self.family in POSTERIOR_FAMILIES and not self.dataset:
            raise ValueError(f"{self.family} needs a dataset path")
        return self


class SamplerSpec(_Strict):
    kind: Literal[KINDS]
    n_chains: int = Field(default=100, ge=1)
    leapfrog_steps: int = Field(default=10, ge=1)
    jump_interval: int = Field(default=25, ge=1)
    initial_step_size: Optional[float] = Field(default=None, gt=0)
    target_accept: Optional[float] = Field(default=None, gt=0, lt=1)
    svi_fraction: Optional[float] = Field(default=None, ge=0, le=1)
    refit_fraction: float = Field(default=0.2, ge=0, le=1)
    probes: Optional[int] = Field(default=None, ge=1)


class FlowSpec(_Strict):
    architecture: str
    hyperparameters: Union[Literal["default"], int, dict] = "default"
    seed: Optional[int] = None
    checkpoint: Optional[str] = None
    fit: bool = True

    @model_validator(mode="after")
    def _known(self):
        if self.architecture not in ARCHITECTURES + EXTRA_ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        try:
            resolve_hyperparameters(self.architecture, self.hyperparameters)
        except NFMCError as exc:
            raise ValueError(str(exc)) from exc
        return self


class BudgetSpec(_Strict):
    warmup_seconds: Optional[float] = Field(default=None, ge=0)
    sampling_seconds: Optional[float] = Field(default=None, ge=0)
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    sampling_steps: Optional[int] = Field(default=None, ge=0)
    fit_steps: Optional[int] = Field(default=None, ge=0)
    refit_steps: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _limits(self):
        if self.warmup_seconds is None and self.warmup_steps is None:
            raise ValueError("warm-up needs warmup_seconds or warmup_steps")
        if self.sampling_seconds is None and self.sampling_steps is None:
            raise ValueError("sampling needs sampling_seconds or sampling_steps")
        return self


class ExperimentConfig(_Strict):
    seed: int = 0
    target: TargetSpec
    sampler: SamplerSpec
    flow: Optional[FlowSpec] = None
    budget: BudgetSpec
    output: Optional[str] = None
    record_timings: bool = False

    @model_validator(mode="after")
    def _flow_matches_kind(self):
        needs = self.sampler.kind in FLOW_KINDS
        if needs and self.flow is None:
            raise ValueError(f"sampler kind {self.sampler.kind} needs a flow spec")
        if not needs and self.flow is not None:
            raise ValueError(f"sampler kind {self.sampler.kind} takes no flow spec")
        return self


def _loc_path(loc):
    return ".".join(str(p) for p in loc) or "<root>"


def config_from_dict(raw) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending key path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", path="<root>")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = _loc_path(err["loc"])
        raise ConfigError(err["msg"], path=path) from None
    try:
        sampler_config(cfg)
    except NFMCError as exc:
        raise ConfigError(str(exc), path="sampler") from None
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", path="<file>") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}", path="<file>") from None
    return config_from_dict(raw)


def sampler_config(cfg: ExperimentConfig) -> SamplerConfig:
    s = cfg.sampler
    interval = s.jump_interval
    if s.kind == "imh" and "jump_interval" not in s.model_fields_set:
        interval = 1
    return SamplerConfig(kind=s.kind, n_chains=s.n_chains,
                         leapfrog_steps=s.leapfrog_steps, jump_interval=interval,
                         initial_step_size=s.initial_step_size,
                         target_accept=s.target_accept, svi_fraction=s.svi_fraction,
                         refit_fraction=s.refit_fraction, probes=s.probes)


def build_experiment_target(spec: TargetSpec):
    raw = spec.model_dump(exclude_none=True)
    dataset = load_dataset(raw.pop("dataset")) if spec.dataset else None
    return build_target(raw, dataset)


def _flow_for(cfg: ExperimentConfig, dim):
    spec = cfg.flow
    if spec.checkpoint:
        flow = load_checkpoint(spec.checkpoint)
        if flow.dim != dim:
            raise InputError("checkpoint dimension differs from the target")
        return flow
    seed = spec.seed if spec.seed is not None else cfg.seed
    return build_flow(spec.architecture, dim, spec.hyperparameters, seed)


def method_name(report) -> str:
    """Method identifier used in rank tables: sampler, flow and grid entry."""
    cfg = report["config"]
    flow = cfg.get("flow")
    if not flow:
        return cfg["sampler"]["kind"]
    return f"{cfg['sampler']['kind']}/{flow['architecture']}/{report.get('hyperparam_id')}"


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment and return its report (also written to ``output``).

    Failures inside the run are recorded in the report (``status`` =
    ``"failed"``) rather than raised.
    """
    report = {"config": cfg.model_dump(mode="json"), "status": "ok", "error": None,
              "b2": None, "result": None, "param_count": 0, "hyperparam_id": None,
              "target": None}
    try:
        target = build_experiment_target(cfg.target)
        report["target"] = target.name
        flow = _flow_for(cfg, target.dim) if cfg.flow is not None else None
        if flow is not None:
            report["param_count"] = flow.n_parameters
            report["hyperparam_id"] = flow.hyperparam_id
        b = cfg.budget
        result = run_sampler(sampler_config(cfg), target, flow=flow, seed=cfg.seed,
                             budget=Budget(**b.model_dump()),
                             fit_flow=cfg.flow.fit if cfg.flow else True)
        payload = result.to_dict()
        if not cfg.record_timings:
            payload["warmup_seconds"] = None
            payload["sampling_seconds"] = None
        report["result"] = payload
        try:
            second, variance = target.reference_moments()
            report["b2"] = squared_bias(np.asarray(result.second_moment), second, variance)
        except MomentsUnavailable:
            report["b2"] = None
    except Exception as exc:  # recorded, never propagated into a batch
        report["status"] = "failed"
        report["error"] = {"type": type(exc).__name__, "message": str(exc),
                           "traceback": traceback.format_exc(limit=5)}
    if cfg.output:
        write_report(report, cfg.output)
    return report


# --------------------------------------------------------------------------
# result files


def _clean(value):
    """Replace non-finite floats by None so reports stay strict JSON."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def dumps_report(report) -> str:
    return json.dumps(_clean(report), sort_keys=True, allow_nan=False)


def write_report(report, path, append=False):
    with open(path, "a" if append else "w") as fh:
        fh.write(dumps_report(report) + "\n")


def read_reports(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def summary_row(report) -> dict:
    cfg = report["config"]
    res = report.get("result") or {}
    flow = cfg.get("flow") or {}
    return {
        "target": report.get("target") or cfg["target"]["family"],
        "sampler": cfg["sampler"]["kind"],
        "flow": flow.get("architecture", ""),
        "hyperparam_id": "" if report.get("hyperparam_id") is None else report["hyperparam_id"],
        "seed": cfg["seed"],
        "b2": "" if report.get("b2") is None else repr(report["b2"]),
        "accept_local": _blank(res.get("accept_rate_local")),
        "accept_jump": _blank(res.get("accept_rate_jump")),
        "warmup_s": _blank(res.get("warmup_seconds")),
        "sampling_s": _blank(res.get("sampling_seconds")),
        "param_count": report.get("param_count", 0),
    }


def _blank(v):
    return "" if v is None else repr(v)


def write_summary(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(summary_row(r))


def _run_path(path):
    """Batch worker: parse and run one config file in isolation."""
    try:
        cfg = parse_config(path)
    except ConfigError as exc:
        return {"config": {"path": str(path)}, "status": "config_error",
                "error": {"type": "ConfigError", "message": str(exc),
                          "path": exc.path}}
    report = run_experiment(cfg)
    report["source"] = Path(path).name
    return report


def run_batch(paths, out_jsonl, summary_csv=None, workers=1):
    """Run every config; returns ``(reports, n_failed)``."""
    paths = sorted(str(p) for p in paths)
    if workers > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_path, paths))
    else:
        reports = [_run_path(p) for p in paths]
    open(out_jsonl, "w").close()
    for r in reports:
        write_report(r, out_jsonl, append=True)
    ok = [r for r in reports if r["status"] == "ok"]
    if summary_csv is not None:
        write_summary(ok, summary_csv)
    return reports, len(reports) - len(ok)


# --------------------------------------------------------------------------
# rank report

GROUPINGS = ("global", "family")


def _family_of(report):
    return report["config"]["target"]["family"]


def rank_report(reports, grouping="global"):
    """Rank methods by b² per target and aggregate over targets.

    Returns a dict with ``rows`` (group, method, mean_rank, se, n_targets),
    ``excluded`` (reports without b²), ``degenerate`` (targets whose ranks
    are all tied) and ``dropped_methods`` (methods missing on some target of
    a group).  Several runs of one method on one target are averaged.
    """
    if grouping not in GROUPINGS:
        raise InputError(f"grouping must be one of {GROUPINGS}")
    per_target = {}
    excluded = []
    for r in reports:
        if r.get("status") != "ok" or r.get("b2") is None:
            excluded.append(_report_label(r))
            continue
        key = (_family_of(r), r.get("target") or _family_of(r))
        per_target.setdefault(key, {}).setdefault(method_name(r), []).append(float(r["b2"]))
    groups = {}
    degenerate = []
    for (family, name), methods in sorted(per_target.items()):
        values = {m: math.fsum(sorted(v)) / len(v) for m, v in methods.items()}
        if len(values) < 2:
            degenerate.append(name)
            continue
        table = RankTable(name, values)
        try:
            table.standardized()
        except DegenerateRanks:
            degenerate.append(name)
            continue
        gkey = "all" if grouping == "global" else family
        groups.setdefault(gkey, []).append(table)
    rows = []
    dropped = []
    for gkey in sorted(groups):
        tables = groups[gkey]
        common = set.intersection(*(set(t.values) for t in tables))
        for t in tables:
            dropped.extend(f"{gkey}:{t.target}:{m}" for m in sorted(set(t.values) - common))
        kept = []
        for t in tables:
            sub = RankTable(t.target, {m: t.values[m] for m in common})
            try:
                if len(common) >= 2:
                    sub.standardized()
                    kept.append(sub)
                else:
                    degenerate.append(t.target)
            except DegenerateRanks:
                degenerate.append(t.target)
        if not kept:
            continue
        agg = aggregate_ranks(kept)
        for method, (mean, se) in agg.items():
            rows.append({"group": gkey, "method": method, "mean_rank": mean,
                         "se": se, "n_targets": len(kept)})
    rows.sort(key=lambda r: (r["group"], r["mean_rank"], r["method"]))
    return {"rows": rows, "excluded": sorted(excluded),
            "degenerate": sorted(set(degenerate)), "dropped_methods": sorted(dropped)}


def _report_label(r):
    cfg = r.get("config", {})
    if "sampler" not in cfg:
        return f"config:{cfg.get('path', '?')}"
    return f"{r.get('target') or cfg['target']['family']}:{method_name(r)}:seed{cfg.get('seed')}"


def write_rank_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "method", "mean_rank", "se", "n_targets"])
        for row in summary["rows"]:
            w.writerow([row["group"], row["method"], f"{row['mean_rank']:.6f}",
                        "" if row["se"] is None else f"{row['se']:.6f}",
                        row["n_targets"]])
        fh.write(f"# excluded (no b2): {len(summary['excluded'])}\n")
        for label in summary["excluded"]:
            fh.write(f"#   {label}\n")
        if summary["degenerate"]:
            fh.write("# degenerate targets: " + ", ".join(summary["degenerate"]) + "\n")
        if summary["dropped_methods"]:
            fh.write("# methods missing on some targets: "
                     + ", ".join(summary["dropped_methods"]) + "\n")


def collect_reports(pattern):
    reports = []
    for path in sorted(globlib.glob(pattern)):
        reports.extend(read_reports(path))
    return reports
