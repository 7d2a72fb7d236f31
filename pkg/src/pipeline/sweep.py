"""
Grid sweeps: one child training run per point of the configured axes, then a
comparison table of peak and final values per child and split.
"""
import csv
import itertools
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.data.profiles import get_recipe_preset
from src.models.config import SWEEP_AXES, ExperimentConfig, build_experiment, set_dotted
from src.modules.progress_tracker import AggregateRow, format_value, mean_curve, transiency
from src.pipeline.training_run import train_run
from src.utils.errors import ConfigError, SweepError
from src.utils.logging_utils import get_logger
from src.utils.settings import get_settings

logger = get_logger(__name__)

COMPARISON_HEADER = ["split", "peak", "peak_step", "final", "final_step", "drop"]

# sweep axis -> dotted config key
_AXIS_KEYS = {
    "class-count": "store.base_classes",
    "swap-rate": "mix.p_label_swap",
    "recipe": "recipe",
    "zipf": "store.zipf.coefficient",
}


@dataclass
class SweepChild:
    name: str
    point: Dict[str, Any]
    config: ExperimentConfig
    run_dir: Path
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _child_name(point: Dict[str, Any]) -> str:
    name = "_".join(f"{axis}={value}" for axis, value in point.items())
    return re.sub(r"[^A-Za-z0-9=._+-]", "-", name)


def grid_points(config: ExperimentConfig) -> List[Dict[str, Any]]:
    """Cartesian product of the axes, in fixed axis order."""
    if config.sweep is None:
        raise ConfigError("experiment has no [sweep] section")
    axes = [a for a in SWEEP_AXES if a in config.sweep.axes]
    values = [config.sweep.axes[a] for a in axes]
    return [dict(zip(axes, combo)) for combo in itertools.product(*values)]


def child_config(config: ExperimentConfig, point: Dict[str, Any], run_dir: Path) -> ExperimentConfig:
    """The parent config with one grid point applied."""
    data = config.model_dump(mode="json")
    data.update(profile=None, sweep=None, name=f"{config.name}/{_child_name(point)}", output_dir=str(run_dir))
    for axis, value in point.items():
        if axis == "recipe":
            preset = get_recipe_preset(str(value))
            if preset is None:
                raise ConfigError(f"unknown recipe preset {value!r}")
            value = preset
        data = set_dotted(data, _AXIS_KEYS[axis], value)
    return build_experiment(data)


def plan_sweep(config: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None) -> List[SweepChild]:
    root = Path(run_dir or config.output_dir)
    children = []
    for point in grid_points(config):
        name = _child_name(point)
        children.append(SweepChild(name, point, child_config(config, point, root / name), root / name))
    return children


def _run_child(config: ExperimentConfig, run_dir: Path, resume: bool) -> Optional[str]:
    try:
        train_run(config, run_dir, resume)
        return None
    except Exception as exc:  # recorded per child; the sweep keeps going
        logger.error(f"❌ Child {run_dir.name} failed: {exc}")
        logger.debug(traceback.format_exc())
        return f"{type(exc).__name__}: {exc}"


def read_aggregate(path: Union[str, Path]) -> List[AggregateRow]:
    with open(path, newline="") as fh:
        return [AggregateRow(int(r["step"]), r["split"], float(r["mean"]), float(r["std"]), int(r["n"]))
                for r in csv.DictReader(fh)]


def comparison_rows(children: List[SweepChild]) -> List[Tuple[SweepChild, Any]]:
    """(child, Transiency) for every completed child and summary split."""
    out = []
    for child in children:
        if not child.ok:
            continue
        rows = read_aggregate(child.run_dir / "aggregate.csv")
        for split in sorted({r.split for r in rows}):
            # per-head probe splits stay in the child logs
            if split.startswith("probe-") and not split.endswith("-max"):
                continue
            out.append((child, transiency(mean_curve(rows, split), split)))
    return out


def write_comparison(path: Union[str, Path], children: List[SweepChild], axes: List[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["child", *axes, *COMPARISON_HEADER])
        for child, t in comparison_rows(children):
            writer.writerow([child.name, *[child.point[a] for a in axes], t.split,
                             format_value(t.peak), t.peak_step, format_value(t.final), t.final_step,
                             format_value(t.drop)])
    return path


def write_status(path: Union[str, Path], children: List[SweepChild]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["child", "status", "error"])
        for c in children:
            writer.writerow([c.name, "ok" if c.ok else "failed", c.error or ""])
    return path


def run_sweep(config: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None, resume: bool = False,
              workers: Optional[int] = None) -> List[SweepChild]:
    """
    Run every grid point, write comparison.csv and sweep-status.csv.

    Children run in separate processes when more than one worker is allowed.
    Raises SweepError after writing the outputs if any child failed.
    """
    root = Path(run_dir or config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    children = plan_sweep(config, root)
    logger.info(f"🧪 Sweep {config.name}: {len(children)} children")
    workers = workers or get_settings().threads
    if workers > 1 and len(children) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_child, c.config, c.run_dir, resume) for c in children]
            for child, fut in zip(children, futures):
                child.error = fut.result()
    else:
        for child in children:
            child.error = _run_child(child.config, child.run_dir, resume)

    axes = [a for a in SWEEP_AXES if a in config.sweep.axes]
    write_comparison(root / "comparison.csv", children, axes)
    write_status(root / "sweep-status.csv", children)
    failed = [c.name for c in children if not c.ok]
    if failed:
        raise SweepError(f"{len(failed)} of {len(children)} sweep children failed: {', '.join(failed)}")
    logger.info(f"🎉 Sweep complete: {root / 'comparison.csv'}")
    return children
