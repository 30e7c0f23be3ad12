"""Run execution and orchestration: single runs, comparisons, sweeps.

Every run writes a metrics CSV plus a manifest with the resolved config,
the seed, the simulated time span, and the CSV's content hash; both files
are written atomically. Artifacts are reproducible from (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .. import __version__
from ..optim import CSV_HEADER, TrainingResult, run_training
from ..problems import build_problem
from .config import RunConfig

ENV_OUT_ROOT = "WAGMA_OUT_ROOT"


@dataclass
class RunArtifacts:
    result: TrainingResult
    out_dir: Path
    metrics_path: Path
    manifest_path: Path
    metrics_sha256: str


def resolve_out_dir(cfg_out: str, override: Optional[str]) -> Path:
    """CLI override beats the config; relative paths live under the
    environment output root when one is set."""
    chosen = Path(override) if override else Path(cfg_out)
    root = os.environ.get(ENV_OUT_ROOT)
    if root and not chosen.is_absolute():
        chosen = Path(root) / chosen
    return chosen


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(data)
    os.replace(tmp, path)


def metrics_csv_text(result: TrainingResult) -> str:
    lines = [CSV_HEADER]
    lines.extend(rec.csv_row() for rec in result.records)
    return "\n".join(lines) + "\n"


def execute_run(cfg: RunConfig, out_dir: Path) -> RunArtifacts:
    """Run one training simulation and persist metrics + manifest."""
    problem = build_problem(cfg.problem)
    result = run_training(
        P=cfg.P,
        mode=cfg.mode,
        opt=cfg.optimizer_config(),
        problem=problem,
        delay=cfg.delay_model(),
        seed=cfg.seed,
        mask_rule=cfg.mask_rule,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text = metrics_csv_text(result)
    digest = hashlib.sha256(csv_text.encode()).hexdigest()
    metrics_path = out_dir / "metrics.csv"
    _atomic_write(metrics_path, csv_text)
    manifest = {
        "schema_version": 1,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "sim_time_start_ms": 0.0,
        "sim_time_end_ms": result.final_time_ms,
        "metrics_sha256": digest,
        "metrics_rows": len(result.records),
    }
    manifest_path = out_dir / "manifest.json"
    _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(
        result=result,
        out_dir=out_dir,
        metrics_path=metrics_path,
        manifest_path=manifest_path,
        metrics_sha256=digest,
    )


# ---------------------------------------------------------------------------
# mode comparison
# ---------------------------------------------------------------------------

def config_for_mode(cfg: RunConfig, mode: str) -> RunConfig:
    """Derive a per-mode config sharing every non-mode field.

    ``wagma`` keeps the base config's beta choice (blocking group variant)
    and otherwise uses the wait-avoiding collective; baselines clear both
    flags. The local SGD baseline follows the usual convention of a
    synchronization period of one, i.e. a plain model-averaging allreduce
    every iteration.
    """
    if mode == "wagma":
        return cfg.with_overrides(mode=mode, alpha=not cfg.beta, beta=cfg.beta)
    if mode == "local_sgd":
        return cfg.with_overrides(mode=mode, alpha=False, beta=False, tau=1)
    return cfg.with_overrides(mode=mode, alpha=False, beta=False)


def run_compare(cfg: RunConfig, modes: list[str], out_dir: Path) -> list[dict]:
    """Run each mode with the shared seed and delay model; tabulate results."""
    rows = []
    seen: dict[str, int] = {}
    for mode in modes:
        n = seen.get(mode, 0)
        seen[mode] = n + 1
        label = mode if n == 0 else f"{mode}#{n + 1}"
        sub = out_dir / label.replace("#", "_")
        artifacts = execute_run(config_for_mode(cfg, mode), sub)
        final = artifacts.result.final
        sim_s = artifacts.result.final_time_ms / 1000.0
        rows.append(
            {
                "mode": label,
                "final_loss": final.loss_mu,
                "grad_norm_sq": final.grad_norm_sq_mu,
                "sim_time_ms": artifacts.result.final_time_ms,
                "iters_per_sim_s": cfg.T / sim_s if sim_s > 0 else float("inf"),
            }
        )
    return rows


def format_compare_table(rows: list[dict]) -> str:
    header = f"{'mode':<14}{'final_loss':>16}{'grad_norm_sq':>16}{'sim_time_ms':>14}{'it/sim_s':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['mode']:<14}{r['final_loss']:>16.6e}{r['grad_norm_sq']:>16.6e}"
            f"{r['sim_time_ms']:>14.2f}{r['iters_per_sim_s']:>12.3f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: RunConfig, dotted_key: str, value) -> RunConfig:
    """Override a top-level or dotted (nested dict) config key."""
    parts = dotted_key.split(".")
    if len(parts) == 1:
        return cfg.with_overrides(**{parts[0]: value})
    top = parts[0]
    current = getattr(cfg, top, None)
    if not isinstance(current, dict):
        raise ValueError(f"cannot apply dotted override to {top!r}")
    nested = json.loads(json.dumps(current))  # deep copy
    node = nested
    for key in parts[1:-1]:
        node = node.setdefault(key, {})
    node[parts[-1]] = value
    return cfg.with_overrides(**{top: nested})


def run_sweep(cfg: RunConfig, vary: str, out_dir: Path) -> list[dict]:
    """Sequentially run the config with each value of ``key=v1,v2,...``."""
    if "=" not in vary:
        raise ValueError("--vary expects key=v1,v2,...")
    key, _, values_text = vary.partition("=")
    values = [_parse_value(v) for v in values_text.split(",") if v != ""]
    if not values:
        raise ValueError("--vary got an empty value list")
    rows = []
    for value in values:
        sub = out_dir / f"{key.replace('.', '_')}={value}"
        artifacts = execute_run(apply_override(cfg, key, value), sub)
        final = artifacts.result.final
        rows.append(
            {
                "key": key,
                "value": value,
                "final_loss": final.loss_mu,
                "grad_norm_sq": final.grad_norm_sq_mu,
                "sim_time_ms": artifacts.result.final_time_ms,
                "out": str(sub),
            }
        )
    return rows
