"""Operator entry point: world generation, data collection, training, evaluation.

Everything is driven by a small INI config in which every default is written
out.  Unknown sections or keys are rejected so typos fail loudly, and seeds
are never filled in silently: a config file must state all of them (the
built-in defaults do).  Each command writes its resolved config next to its
outputs and logs one timestamped event per line on stderr; report files
carry no timestamps, so two runs with the same config and seed produce
byte-identical reports.
"""

from __future__ import annotations

import argparse
import configparser
import io
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import controller as ctl
from . import evalsuite as ev
from . import trainer as tr
from . import worldsim as ws
from .datastore import Dataset, save_lap
from .distmetrics import MetricKind
from .embednet import init_detector, load_detector, save_detector
from .navigator import N_QUERY

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GATE = 3  # argparse uses 2 for usage errors

COMMANDS = (
    "gen-world",
    "collect",
    "train-detector",
    "train-controller",
    "eval-offline",
    "eval-online",
    "ablate",
    "corrupt-eval",
    "reproduce-all",
)


class CliError(Exception):
    pass


class GateError(Exception):
    """An acceptance gate configured in [eval] was violated."""


# ---------------------------------------------------------------------------
# Config handling


DEFAULT_CONFIG = """\
[world]
seed = 7
train = 6
val = 3
test = 3
corners = 8
long_corners = 20
min_edge = 5
max_edge = 9
noise_sigma = 0.02

[dataset]
laps_train = 3
laps_val = 2
laps_test = 3
laps_long = 2

[detector]
metric = sym_mahalanobis
form = multivariate
backbone_seed = 107
init_seed = 207
feature_dim = 128
embed_dim = 32

[trainer]
seed = 307
phase1_iterations = 240
phase1_batch_episodes = 36
phase1_lr = 1e-4
phase2_iterations = 1500
phase2_batch_episodes = 3
phase2_lr = 1e-5
ablation_phase1_iterations = 96
ablation_phase2_iterations = 400

[controller]
seed = 607
backbone_seed = 407
init_seed = 507
epochs = 100
batch_size = 256
lr = 1e-4
junction_reps = 3
augment_draws = 1

[navigator]
n_query = 10
buffer_before = 5
buffer_after = 5

[eval]
seed = 707
corruption_seed = 807
threshold = 0
repeats = 2
min_offline_accuracy = 0
min_online_success = 0
"""

_SCHEMA: dict[str, dict[str, Callable]] = {
    "world": {
        "seed": int, "train": int, "val": int, "test": int, "corners": int,
        "long_corners": int, "min_edge": int, "max_edge": int, "noise_sigma": float,
    },
    "dataset": {"laps_train": int, "laps_val": int, "laps_test": int, "laps_long": int},
    "detector": {
        "metric": str, "form": str, "backbone_seed": int, "init_seed": int,
        "feature_dim": int, "embed_dim": int,
    },
    "trainer": {
        "seed": int, "phase1_iterations": int, "phase1_batch_episodes": int,
        "phase1_lr": float, "phase2_iterations": int, "phase2_batch_episodes": int,
        "phase2_lr": float, "ablation_phase1_iterations": int,
        "ablation_phase2_iterations": int,
    },
    "controller": {
        "seed": int, "backbone_seed": int, "init_seed": int, "epochs": int,
        "batch_size": int, "lr": float, "junction_reps": int, "augment_draws": int,
    },
    "navigator": {"n_query": int, "buffer_before": int, "buffer_after": int},
    "eval": {
        "seed": int, "corruption_seed": int, "threshold": float, "repeats": int,
        "min_offline_accuracy": float, "min_online_success": float,
    },
}

# filled by a --seed master override, in this order
_SEED_KEYS = (
    ("world", "seed"),
    ("detector", "backbone_seed"),
    ("detector", "init_seed"),
    ("trainer", "seed"),
    ("controller", "backbone_seed"),
    ("controller", "init_seed"),
    ("controller", "seed"),
    ("eval", "seed"),
    ("eval", "corruption_seed"),
)


class Config:
    """Validated, typed view of a parsed config."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def text(self) -> str:
        """The resolved config, re-rendered in schema order."""
        out = io.StringIO()
        for si, (section, keys) in enumerate(_SCHEMA.items()):
            if si:
                out.write("\n")
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_render(self.values[section][key])}\n")
        return out.getvalue()


def _render(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_ini(text: str, origin: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise CliError(f"bad config {origin}: {exc}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(
    path: str | None,
    overrides: Sequence[str] = (),
    master_seed: int | None = None,
) -> Config:
    """Parse, override, and validate a config.

    Non-seed keys missing from a user config fall back to the built-in
    defaults; seed keys must be stated explicitly (or supplied via --seed).
    """
    raw = {s: dict(v) for s, v in _parse_ini(DEFAULT_CONFIG, "<defaults>").items()}
    explicit: set[tuple[str, str]] = set()
    if path is not None:
        user = _parse_ini(Path(path).read_text(), str(path))
        for section, items in user.items():
            if section not in _SCHEMA:
                raise CliError(f"unknown config section [{section}]")
            for key, value in items.items():
                if key not in _SCHEMA[section]:
                    raise CliError(f"unknown config key {section}.{key}")
                raw[section][key] = value
                explicit.add((section, key))
    for raw_override in overrides:
        target, eq, value = raw_override.partition("=")
        section, dot, key = target.partition(".")
        if not eq or not dot:
            raise CliError(f"override {raw_override!r} is not section.key=value")
        section, key, value = section.strip(), key.strip(), value.strip()
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise CliError(f"unknown config key {section}.{key}")
        raw[section][key] = value
        explicit.add((section, key))
    if master_seed is not None:
        for offset, (section, key) in enumerate(_SEED_KEYS):
            raw[section][key] = str(master_seed + 100 * offset)
    elif path is not None:
        missing = [f"{s}.{k}" for s, k in _SEED_KEYS if (s, k) not in explicit]
        if missing:
            raise CliError(
                "seeds are never defaulted: set "
                + ", ".join(missing)
                + f" in {path} or pass --seed"
            )
    values: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, conv in keys.items():
            rawval = raw[section][key]
            try:
                values[section][key] = conv(rawval)
            except ValueError:
                raise CliError(f"config {section}.{key}: cannot parse {rawval!r}")
    cfg = Config(values)
    _check_config(cfg)
    return cfg


def _check_config(cfg: Config) -> None:
    try:
        MetricKind.parse(cfg.get("detector", "metric"), cfg.get("detector", "form"))
    except ValueError as exc:
        raise CliError(f"detector.metric/form: {exc}")
    if cfg.get("navigator", "n_query") != N_QUERY:
        raise CliError(f"this build fixes navigator.n_query at {N_QUERY}")
    for section, key in (("dataset", "laps_train"), ("dataset", "laps_val"), ("dataset", "laps_test")):
        n = cfg.get(section, key)
        if not 2 <= n <= 8:
            raise CliError(f"{section}.{key} must be between 2 and 8, got {n}")
    if cfg.get("dataset", "laps_long") < 2:
        raise CliError("dataset.laps_long must be at least 2 (memory laps)")
    for key in ("buffer_before", "buffer_after"):
        if cfg.get("navigator", key) < 0:
            raise CliError(f"navigator.{key} must not be negative")
    t = cfg.get("eval", "threshold")
    if t != 0 and not 0.0 < t < 1.0:
        raise CliError("eval.threshold must be 0 (validation-chosen) or in (0, 1)")


# ---------------------------------------------------------------------------
# Logging and paths


def log_event(stage: str, **fields) -> None:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    parts = [stamp, stage]
    for key, value in fields.items():
        parts.append(f"{key}={ev.format_value(value)}")
    print(" ".join(parts), file=sys.stderr, flush=True)


class Layout:
    """Directory layout below the output root."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.data = self.out / "data"
        self.checkpoints = self.out / "checkpoints"
        self.reports = self.out / "reports"
        self.history = self.out / "history"
        self.detector = self.checkpoints / "detector.ckpt"
        self.controller = self.checkpoints / "controller.ckpt"

    def write_resolved(self, cfg: Config) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "resolved.cfg").write_text(cfg.text())


def _write_tables(layout: Layout, name: str, entries: list[tuple[str, ...]]) -> None:
    if not entries:
        raise CliError(f"refusing to write empty report {name}")
    layout.reports.mkdir(parents=True, exist_ok=True)
    ev.write_report(layout.reports / f"{name}.csv", entries)
    (layout.reports / f"{name}.txt").write_text(ev.render_report(entries))
    log_event(name, rows=len(entries), path=str(layout.reports / f"{name}.csv"))


# ---------------------------------------------------------------------------
# Shared pipeline pieces


def _worlds(cfg: Config) -> list[ws.World]:
    w = cfg["world"]
    return ws.generate_world_set(
        w["seed"], n_train=w["train"], n_val=w["val"], n_test=w["test"],
        corners=w["corners"], long_corners=w["long_corners"],
        min_edge=w["min_edge"], max_edge=w["max_edge"],
    )


def _roles(worlds: list[ws.World]) -> dict[str, str]:
    return {course.course_id: world.role for world in worlds for course in world.courses}


def _laps_per_role(cfg: Config) -> dict[str, int]:
    d = cfg["dataset"]
    return {
        "train": d["laps_train"], "val": d["laps_val"],
        "test": d["laps_test"], "long": d["laps_long"],
    }


def _open_dataset(cfg: Config, layout: Layout, worlds: list[ws.World]) -> Dataset:
    if not layout.data.is_dir():
        raise CliError(f"no collected laps under {layout.data}; run `waynav collect` first")
    dataset = Dataset.open(layout.data, _roles(worlds))
    expected = _laps_per_role(cfg)
    for world in worlds:
        for course in world.courses:
            have = len(dataset.by_course.get(course.course_id, []))
            if have != expected[world.role]:
                raise CliError(
                    f"{course.course_id}: found {have} laps, config wants "
                    f"{expected[world.role]}; re-run `waynav collect`"
                )
    return dataset


def _load_detector(layout: Layout):
    if not layout.detector.is_file():
        raise CliError(f"no detector checkpoint at {layout.detector}; run `waynav train-detector` first")
    return load_detector(layout.detector)


def _load_controller(layout: Layout):
    if not layout.controller.is_file():
        raise CliError(
            f"no controller checkpoint at {layout.controller}; run `waynav train-controller` first"
        )
    return ctl.load_controller(layout.controller)


def _phase_hypers(cfg: Config) -> tuple[tr.TrainHyper, tr.TrainHyper]:
    t = cfg["trainer"]
    phase1 = tr.phase1_hyper(
        t["seed"], iterations=t["phase1_iterations"],
        batch_episodes=t["phase1_batch_episodes"], lr=t["phase1_lr"],
    )
    phase2 = tr.phase2_hyper(
        t["seed"] + 1, iterations=t["phase2_iterations"],
        batch_episodes=t["phase2_batch_episodes"], lr=t["phase2_lr"],
    )
    return phase1, phase2


def _resolve_threshold(cfg: Config, params, dataset, cache=None) -> float:
    configured = cfg.get("eval", "threshold")
    if configured:
        return configured
    chosen = tr.validate(params, dataset, role="val", cache=cache).best_threshold
    log_event("threshold", source="validation", value=chosen)
    return chosen


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_world(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    rows = []
    for world in worlds:
        for course in world.courses:
            rows.append(
                {
                    "course": course.course_id,
                    "role": world.role,
                    "waypoints": course.n_waypoints,
                    "loop": course.loop_length,
                    "turns": "".join(w.action.value[0].upper() for w in course.waypoints),
                }
            )
    entries = ev.flatten_rows(
        "worlds", rows, ("course",), ("role", "waypoints", "loop", "turns"),
        cfg.get("world", "seed"), 0.0,
    )
    _write_tables(layout, "worlds", entries)
    log_event("gen-world", worlds=len(worlds), courses=len(rows))
    return EXIT_OK


def cmd_collect(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    per_role = _laps_per_role(cfg)
    seed = cfg.get("world", "seed")
    noise = cfg.get("world", "noise_sigma")
    total = 0
    for world in worlds:
        for course in world.courses:
            for i in range(per_role[world.role]):
                lap = ws.record_lap(world, course, f"lap{i:02d}", seed=seed, noise_sigma=noise)
                lap.set_labels(*ws.segment_lap(lap, course))
                save_lap(lap, layout.data)
                total += 1
            log_event(
                "collect", course=course.course_id, laps=per_role[world.role],
                frames=lap.n_frames,
            )
    log_event("collect", total_laps=total, path=str(layout.data))
    return EXIT_OK


def cmd_train_detector(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    d = cfg["detector"]
    kind = MetricKind.parse(d["metric"], d["form"])
    phase1, phase2 = _phase_hypers(cfg)
    params, results = tr.train_detector(
        dataset, kind, d["backbone_seed"], d["init_seed"], phase1, phase2,
        log=lambda msg: log_event("train-detector", note=msg),
    )
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    save_detector(params, layout.detector)
    tr.save_history(layout.history / "detector.csv", results)
    final = results["phase2"].final_validation
    log_event(
        "train-detector", metric=kind.label(), val_accuracy=results["phase2"].best_accuracy,
        threshold=final.best_threshold if final else 0.5, checkpoint=str(layout.detector),
    )
    return EXIT_OK


def cmd_train_controller(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    c = cfg["controller"]
    params = ctl.init_controller(c["backbone_seed"], c["init_seed"])
    labelled = []
    for world in worlds:
        for course in world.courses:
            actions = [w.action for w in course.waypoints]
            for lap in dataset.laps(course.course_id):
                labelled.append((lap, ctl.command_targets(lap, actions)))
            junctions = ctl.junction_laps(world, course, seed=c["seed"], reps=c["junction_reps"])
            labelled.extend(junctions)
            log_event(
                "train-controller", course=course.course_id,
                route_laps=len(dataset.laps(course.course_id)), branch_drives=len(junctions),
            )
    aug_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((c["seed"], 1))))
    feats, commands, steering = ctl.control_samples(
        params, labelled, augment_draws=c["augment_draws"], rng=aug_rng
    )
    history = ctl.train_controller(
        params, feats, commands, steering,
        epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], seed=c["seed"],
    )
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    ctl.save_controller(params, layout.controller)
    layout.history.mkdir(parents=True, exist_ok=True)
    with open(layout.history / "controller.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i + 1},{loss:.8f}\n")
    log_event(
        "train-controller", samples=len(steering), final_loss=history[-1],
        checkpoint=str(layout.controller),
    )
    return EXIT_OK


def cmd_eval_offline(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    params = _load_detector(layout)
    threshold = _resolve_threshold(cfg, params, dataset)
    nav = cfg["navigator"]
    result = ev.eval_offline(
        params, dataset, role="test", threshold=threshold,
        buffer_before=nav["buffer_before"], buffer_after=nav["buffer_after"],
    )
    seed = cfg.get("eval", "seed")
    entries = ev.flatten_rows(
        "offline", result.rows, ("course", "memory_lap", "test_lap"),
        ("accuracy", "false_pos", "false_neg"), seed, threshold,
    )
    summary = [
        {"name": "mean", "accuracy": result.mean_accuracy,
         "false_pos": result.total_false_pos, "false_neg": result.total_false_neg}
    ]
    entries += ev.flatten_rows(
        "offline_summary", summary, ("name",), ("accuracy", "false_pos", "false_neg"),
        seed, threshold,
    )
    _write_tables(layout, "offline", entries)
    log_event("eval-offline", accuracy=result.mean_accuracy, configurations=len(result.rows))
    gate = cfg.get("eval", "min_offline_accuracy")
    if gate and result.mean_accuracy < gate:
        raise GateError(f"offline accuracy {result.mean_accuracy:.4f} below gate {gate}")
    return EXIT_OK


def cmd_corrupt_eval(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    params = _load_detector(layout)
    threshold = _resolve_threshold(cfg, params, dataset)
    nav = cfg["navigator"]
    rows = ev.eval_corruptions(
        params, dataset, role="test", threshold=threshold,
        seed=cfg.get("eval", "corruption_seed"), jobs=jobs,
        buffer_before=nav["buffer_before"], buffer_after=nav["buffer_after"],
    )
    seed = cfg.get("eval", "seed")
    summary = [
        {"kind": kind, "severity": sev, "accuracy": acc}
        for (kind, sev), acc in ev.corruption_summary(rows).items()
    ]
    entries = ev.flatten_rows("corruption", summary, ("kind", "severity"), ("accuracy",), seed, threshold)
    entries += ev.flatten_rows(
        "corruption_detail", rows, ("kind", "severity", "course", "test_lap"),
        ("accuracy",), seed, threshold,
    )
    _write_tables(layout, "corruptions", entries)
    log_event("corrupt-eval", cells=len(rows))
    return EXIT_OK


def cmd_ablate(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    d, t = cfg["detector"], cfg["trainer"]
    phase1 = tr.phase1_hyper(
        t["seed"], iterations=t["ablation_phase1_iterations"],
        batch_episodes=t["phase1_batch_episodes"], lr=t["phase1_lr"],
    )
    phase2 = tr.phase2_hyper(
        t["seed"] + 1, iterations=t["ablation_phase2_iterations"],
        batch_episodes=t["phase2_batch_episodes"], lr=t["phase2_lr"],
        halve_every=max(t["ablation_phase2_iterations"] // 4, 1),
    )
    rows = ev.ablation_grid(
        dataset, d["backbone_seed"], d["init_seed"], phase1, phase2,
        log=lambda msg: log_event("ablate", note=msg),
    )
    seed = cfg.get("eval", "seed")
    grid = [
        {"metric": r["metric"], "cell": f"{r['form']}/{r['regime']}", "accuracy": r["test_accuracy"]}
        for r in rows
    ]
    pivot: dict[str, dict] = {}
    for g in grid:
        pivot.setdefault(g["metric"], {"metric": g["metric"]})[g["cell"]] = g["accuracy"]
    cells = sorted({g["cell"] for g in grid})
    entries = ev.flatten_rows("ablation", list(pivot.values()), ("metric",), cells, seed, 0.0)
    entries += ev.flatten_rows(
        "ablation_detail", rows, ("metric", "form", "regime"),
        ("threshold", "val_accuracy", "test_accuracy"), seed, 0.0,
    )
    _write_tables(layout, "ablation", entries)
    best = max(rows, key=lambda r: r["test_accuracy"])
    log_event(
        "ablate", cells=len(rows),
        best=f"{best['metric']}/{best['form']}/{best['regime']}",
        best_accuracy=best["test_accuracy"],
    )
    return EXIT_OK


def cmd_eval_online(cfg: Config, layout: Layout, jobs: int) -> int:
    worlds = _worlds(cfg)
    dataset = _open_dataset(cfg, layout, worlds)
    det = _load_detector(layout)
    controller = _load_controller(layout)
    threshold = _resolve_threshold(cfg, det, dataset)
    seed = cfg.get("eval", "seed")
    repeats = cfg.get("eval", "repeats")
    noise = cfg.get("world", "noise_sigma")

    courses = []
    for world in worlds:
        if world.role == "test":
            courses.extend((world, c) for c in world.courses)
        elif world.role == "long":
            courses.append((world, world.course("ccw")))
    if not courses:
        raise CliError("config defines no test courses")

    def run_all(at: float) -> dict[str, ev.OnlineResult]:
        results = {}
        for world, course in courses:
            mems = dataset.laps(course.course_id)[:2]
            if len(mems) < 2:
                raise CliError(f"{course.course_id}: need two memory laps, run `waynav collect`")
            results[course.course_id] = ev.eval_online(
                world, course, det, controller, mems, at, seed,
                repeats=repeats, noise_sigma=noise,
            )
            log_event(
                "eval-online", course=course.course_id, threshold=at,
                waypoints=f"{results[course.course_id].waypoint_successes}"
                f"/{results[course.course_id].waypoint_attempts}",
            )
        return results

    main = run_all(threshold)
    sweep = {at: main if at == threshold else run_all(at) for at in (0.5, 0.65)}

    rows = [
        {
            "course": cid,
            "wp_successes": r.waypoint_successes,
            "wp_attempts": r.waypoint_attempts,
            "course_successes": r.course_successes,
            "course_attempts": r.course_attempts,
            "success_rate": r.waypoint_successes / r.waypoint_attempts,
        }
        for cid, r in main.items()
    ]
    total_succ = sum(r.waypoint_successes for r in main.values())
    total_att = sum(r.waypoint_attempts for r in main.values())
    rows.append(
        {
            "course": "total",
            "wp_successes": total_succ,
            "wp_attempts": total_att,
            "course_successes": sum(r.course_successes for r in main.values()),
            "course_attempts": sum(r.course_attempts for r in main.values()),
            "success_rate": total_succ / total_att,
        }
    )
    entries = ev.flatten_rows(
        "online", rows, ("course",),
        ("wp_successes", "wp_attempts", "course_successes", "course_attempts", "success_rate"),
        seed, threshold,
    )
    cmp_rows = [
        {
            "course": cid,
            "success_at_050": sweep[0.5][cid].waypoint_successes,
            "success_at_065": sweep[0.65][cid].waypoint_successes,
        }
        for cid in main
    ]
    entries += ev.flatten_rows(
        "online_thresholds", cmp_rows, ("course",),
        ("success_at_050", "success_at_065"), seed, threshold,
    )
    _write_tables(layout, "online", entries)
    rate = total_succ / total_att
    log_event("eval-online", success_rate=rate, threshold=threshold)
    gate = cfg.get("eval", "min_online_success")
    if gate and rate < gate:
        raise GateError(f"online waypoint success {rate:.4f} below gate {gate}")
    return EXIT_OK


def cmd_reproduce_all(cfg: Config, layout: Layout, jobs: int) -> int:
    stages = (
        cmd_gen_world, cmd_collect, cmd_train_detector, cmd_train_controller,
        cmd_eval_offline, cmd_corrupt_eval, cmd_ablate, cmd_eval_online,
    )
    code = EXIT_OK
    for stage in stages:
        code = max(code, stage(cfg, layout, jobs))
    return code


_HANDLERS = {
    "gen-world": cmd_gen_world,
    "collect": cmd_collect,
    "train-detector": cmd_train_detector,
    "train-controller": cmd_train_controller,
    "eval-offline": cmd_eval_offline,
    "eval-online": cmd_eval_online,
    "ablate": cmd_ablate,
    "corrupt-eval": cmd_corrupt_eval,
    "reproduce-all": cmd_reproduce_all,
}


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="waynav",
        description="Waypoint navigation pipeline: worlds, laps, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="config file; defaults to the built-in config")
        p.add_argument("--seed", type=int, help="master seed overriding every seed key")
        p.add_argument(
            "--jobs", type=int, default=1,
            help="worker threads for independent evaluation cells (default 1)",
        )
        p.add_argument("--out", default="out", help="output directory (default ./out)")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override a single config key; repeatable",
        )
        if name in ("eval-offline", "eval-online", "corrupt-eval"):
            p.add_argument("--threshold", type=float, help="shorthand for --set eval.threshold=...")
    return parser


def run(argv: Sequence[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = list(args.set)
    if getattr(args, "threshold", None) is not None:
        overrides.append(f"eval.threshold={args.threshold}")
    try:
        cfg = load_config(args.config, overrides, args.seed)
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1")
        layout = Layout(Path(args.out))
        layout.write_resolved(cfg)
        log_event(args.command, out=str(layout.out), jobs=args.jobs)
        return _HANDLERS[args.command](cfg, layout, args.jobs)
    except GateError as exc:
        log_event("gate-violation", detail=str(exc))
        return EXIT_GATE
    except (CliError, OSError) as exc:
        print(f"waynav: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
