"""Pipeline stages over a workspace directory, their configuration, and the artifact manifest.

Every stage reads its inputs from the workspace, writes its outputs there,
and draws randomness only from a seed derived from the global seed and the
module name, so any stage can be re-run on its own.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import annotation as ann
from . import evaluation, hdphmm, net, sampler, synthgen, trajectory

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


def derive_seed(global_seed: int, module: str) -> int:
    """64-bit per-module seed from the global seed."""
    digest = hashlib.sha256(f"{int(global_seed)}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- configuration --------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    n_junctions: int = 4
    runs: int = 8
    test_runs: int = 2
    frame_stride: int = 2
    speed: float = 5.0
    dt: float = 0.1
    lateral_noise: float = 0.2
    heading_noise: float = 0.005
    speed_noise: float = 0.05
    image_dtype: str = "uint8"


@dataclass(frozen=True)
class SegmentConfig:
    grid_spacing: float = 0.5
    statistic: str = "mean"
    straight_band: float = 0.05
    truncation_L: int = 10
    gamma: float = 1.0
    alpha: float = 1.0
    kappa: float = 50.0
    mean0: float = 0.0
    precision_scale: float = 0.1
    shape: float = 2.0
    rate: float = 0.02
    iterations: int = 500
    burn_in: int = 250

    def hdphmm(self, seed: int) -> hdphmm.HdpHmmConfig:
        return hdphmm.HdpHmmConfig(
            truncation_L=self.truncation_L, gamma=self.gamma, alpha=self.alpha, kappa=self.kappa,
            emission_prior=hdphmm.EmissionPrior(self.mean0, self.precision_scale, self.shape, self.rate),
            iterations=self.iterations, burn_in=self.burn_in, seed=seed)


@dataclass(frozen=True)
class AnnotateConfig:
    max_dist: float = 15.0


@dataclass(frozen=True)
class EvalConfig:
    report: bool = False


SECTIONS = {
    "synthgen": GenConfig,
    "hdphmm": SegmentConfig,
    "annotation": AnnotateConfig,
    "sampler": sampler.SamplerConfig,
    "net": net.NetConfig,
    "eval": EvalConfig,
}
# short flag names accepted next to the field names
ALIASES = {("net", "lr"): "learning_rate", ("hdphmm", "L"): "truncation_L"}
NOT_CONFIGURABLE = {("sampler", "seed"), ("net", "seed")}


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            # "16x5x2, 32x5x2" -> ((16, 5, 2), (32, 5, 2))
            return tuple(tuple(int(v) for v in item.strip().split("x")) for item in text.split(",") if item.strip())
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return text


@dataclass
class PipelineConfig:
    seed: int = 0
    workspace: Path = Path("workspace")
    sections: dict = field(default_factory=dict)

    def build(self, name: str):
        cls = SECTIONS[name]
        values = dict(self.sections.get(name, {}))
        if name in ("sampler", "net"):
            values["seed"] = derive_seed(self.seed, name) % (2**63)
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc

    def set(self, section: str, key: str, text: str) -> None:
        if section == "pipeline":
            if key == "seed":
                self.seed = int(text)
            elif key == "workspace":
                self.workspace = Path(text)
            else:
                raise ConfigError(f"unknown key pipeline.{key}")
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        key = ALIASES.get((section, key), key)
        defaults = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if key not in defaults or (section, key) in NOT_CONFIGURABLE:
            raise ConfigError(f"unknown key {section}.{key}")
        f = defaults[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            value = _parse_value(text, default)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc
        self.sections.setdefault(section, {})[key] = value

    def validate(self) -> None:
        for name in SECTIONS:
            self.build(name)
        g = self.build("synthgen")
        if g.test_runs < 1 or g.runs - g.test_runs < 1:
            raise ConfigError("synthgen needs at least one training run and one test run")
        if g.image_dtype not in ("uint8", "float32"):
            raise ConfigError("synthgen.image_dtype must be uint8 or float32")


def load_config(path=None, overrides: dict | None = None, seed=None, workspace=None) -> PipelineConfig:
    """Layered config: defaults < INI file < flag overrides (``{"net.lr": "1e-3"}``)."""
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        cfg.set(section, key, value)
    if seed is not None:
        cfg.seed = int(seed)
    if workspace is not None:
        cfg.workspace = Path(workspace)
    cfg.validate()
    return cfg


# -- workspace files ------------------------------------------------------

FILES = {
    "world": ["world.json"],
    "drives": ["drives.csv", "frames.csv", "images.bin", "truth.csv"],
    "segmentation": ["series.csv", "actions.csv", "segments.csv"],
    "annotations": ["annotations.csv"],
    "checkpoint": ["checkpoint.bin", "train_log.csv"],
    "predictions": ["predictions.csv"],
    "metrics": ["metrics.txt", "metrics.json"],
}
STAGES = ("gen", "segment", "annotate", "train", "infer", "eval")


def write_frames(path, frames: list[tuple[ann.FrameRef, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame_id", "run_id", "pose_index", "split"))
        for fr, split in frames:
            w.writerow((fr.frame_id, fr.run_id, fr.pose_index, split))


def read_frames(path) -> list[tuple[ann.FrameRef, str]]:
    with open(path, newline="") as fh:
        return [(ann.FrameRef(r["frame_id"], r["run_id"], int(r["pose_index"])), r["split"])
                for r in csv.DictReader(fh)]


def _need(ws: Path, stage: str, *names):
    for n in names:
        if not (ws / n).exists():
            raise StageError(stage, f"missing input {ws / n}; run the earlier stages first")


# -- stages ---------------------------------------------------------------

def stage_gen(cfg: PipelineConfig) -> None:
    ws = cfg.workspace
    g = cfg.build("synthgen")
    seed = derive_seed(cfg.seed, "synthgen")
    cam = ann.CameraModel()
    world = synthgen.generate_world(seed % (2**32), synthgen.WorldSpec(n_junctions=g.n_junctions))
    (ws / "world.json").write_text(world.to_json())
    noise = synthgen.DriveNoise(lateral=g.lateral_noise, heading=g.heading_noise, speed=g.speed_noise)
    dcfg = synthgen.DriveConfig(speed=g.speed, dt=g.dt, noise=noise)
    run_seeds = np.random.SeedSequence(seed).spawn(g.runs)
    trajs = [synthgen.simulate_drive(world, seed=np.random.default_rng(s), cfg=dcfg, run_id=f"run{i:02d}")
             for i, s in enumerate(run_seeds)]
    trajectory.write_trajectories(ws / "drives.csv", trajs)

    geom = synthgen.RouteGeometry(world)
    frames = []
    for i, tr in enumerate(trajs):
        split = "test" if i >= g.runs - g.test_runs else "train"
        frames += [(fr, split) for fr in synthgen.select_frames(tr, geom, stride=g.frame_stride)]
    write_frames(ws / "frames.csv", frames)
    by_run = {tr.run_id: tr for tr in trajs}
    max_dist = cfg.build("annotation").max_dist
    truth = []
    with synthgen.ImageWriter(ws / "images.bin", np.dtype(g.image_dtype)) as w:
        for fr, _ in frames:
            pose = by_run[fr.run_id].poses[fr.pose_index]
            w.write(synthgen.render_frame(cam, world, pose))
            truth.append(geom.truth(cam, pose, fr.frame_id, max_dist))
    ann.write_affordances(ws / "truth.csv", truth)
    logger.info("gen: %d runs, %d frames", len(trajs), len(frames))


def _train_runs(ws: Path):
    runs = {fr.run_id for fr, split in read_frames(ws / "frames.csv") if split == "train"}
    return [t for t in trajectory.read_trajectories(ws / "drives.csv") if t.run_id in runs]


def stage_segment(cfg: PipelineConfig) -> None:
    ws = cfg.workspace
    _need(ws, "segment", "drives.csv", "frames.csv")
    s = cfg.build("hdphmm")
    series = trajectory.synchronize(_train_runs(ws), s.grid_spacing, statistic=s.statistic)
    trajectory.write_series(ws / "series.csv", series)
    segment_series(ws / "series.csv", ws / "actions.csv", ws / "segments.csv", s,
                   derive_seed(cfg.seed, "hdphmm"))


def segment_series(series_path, actions_path, segments_path, s: SegmentConfig, seed: int) -> hdphmm.ActionSequence:
    series = trajectory.read_series(series_path)
    fit = hdphmm.fit(series, s.hdphmm(seed))
    seq = hdphmm.semantic_relabel(fit, s.straight_band)
    hdphmm.write_actions(actions_path, seq, segments_path)
    logger.info("segment: %d occupied states, %d segments", fit.occupied_states, len(seq.segments))
    return seq


def stage_annotate(cfg: PipelineConfig) -> None:
    ws = cfg.workspace
    _need(ws, "annotate", "drives.csv", "frames.csv", "actions.csv")
    actions = hdphmm.read_actions(ws / "actions.csv")
    trajs = {t.run_id: t for t in _train_runs(ws)}
    per_run: dict[str, list] = {}
    for fr, split in read_frames(ws / "frames.csv"):
        if split == "train":
            per_run.setdefault(fr.run_id, []).append(fr)
    drives = [(trajs[r], actions, frs) for r, frs in per_run.items()]
    data, skipped = ann.build_dataset(drives, ann.CameraModel(), cfg.build("annotation").max_dist)
    ann.write_annotations(ws / "annotations.csv", [d.label for d in data])
    logger.info("annotate: %d labelled frames, %d unlabelable", len(data), skipped)


class _Subset:
    """Lazy view of selected frames of an image stack."""

    def __init__(self, stack, indices):
        self.stack = stack
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.stack[self.indices[i]]


def stage_train(cfg: PipelineConfig) -> None:
    ws = cfg.workspace
    _need(ws, "train", "frames.csv", "images.bin", "annotations.csv")
    index = {fr.frame_id: i for i, (fr, _) in enumerate(read_frames(ws / "frames.csv"))}
    labels = ann.read_annotations(ws / "annotations.csv")
    if not labels:
        raise StageError("train", "no annotated frames")
    stack = synthgen.ImageStack(ws / "images.bin")
    dataset = sampler.FrameDataset(_Subset(stack, [index[lb.frame_id] for lb in labels]), labels)
    history: list = []
    ncfg = cfg.build("net")
    t0 = time.time()
    try:
        params = net.train(dataset, ncfg, cfg.build("sampler"), history=history)
    except net.TrainingDivergedError as exc:
        net.save_params(ws / "checkpoint.bin", exc.params)
        raise StageError("train", f"{exc}; last finite parameters saved to {ws / 'checkpoint.bin'}") from exc
    net.save_params(ws / "checkpoint.bin", params)
    with open(ws / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "multilabel", "distance", "top1"))
        for row in history:
            w.writerow((row[0], *(repr(v) for v in row[1:])))
    logger.info("train: %d steps in %.0f s", ncfg.rounds * ncfg.iterations, time.time() - t0)


def stage_infer(cfg: PipelineConfig) -> None:
    ws = cfg.workspace
    _need(ws, "infer", "frames.csv", "images.bin", "checkpoint.bin")
    params = net.load_params(ws / "checkpoint.bin")
    ncfg = cfg.build("net")
    stack = synthgen.ImageStack(ws / "images.bin")
    preds = [net.infer_full(params, stack[i], ncfg, fr.frame_id)
             for i, (fr, split) in enumerate(read_frames(ws / "frames.csv")) if split == "test"]
    ann.write_affordances(ws / "predictions.csv", preds)
    logger.info("infer: %d test frames", len(preds))


def stage_eval(cfg: PipelineConfig) -> evaluation.MetricsReport:
    ws = cfg.workspace
    _need(ws, "eval", "predictions.csv", "truth.csv", "checkpoint.bin")
    D = net.load_params(ws / "checkpoint.bin").downsample
    return evaluate_files(ws / "predictions.csv", ws / "truth.csv", ws / "metrics.txt", ws / "metrics.json",
                          ws / "metrics_bars.csv" if cfg.build("eval").report else None, D)


def evaluate_files(pred_path, truth_path, text_path, json_path, bars_path=None, D: int = 16):
    preds = ann.read_affordances(pred_path)
    wanted = {p.frame_id for p in preds}
    truth = [t for t in ann.read_affordances(truth_path) if t.frame_id in wanted]
    rep = evaluation.evaluate(preds, truth, D)
    evaluation.write_report(rep, text_path, json_path, bars_path)
    return rep


STAGE_FUNCS = {
    "gen": stage_gen, "segment": stage_segment, "annotate": stage_annotate,
    "train": stage_train, "infer": stage_infer, "eval": stage_eval,
}


# -- manifest -------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(cfg: PipelineConfig) -> dict:
    ws = cfg.workspace
    entries = []
    for kind, names in FILES.items():
        for name in names:
            p = ws / name
            if p.exists():
                entries.append({"kind": kind, "path": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    return {"seed": cfg.seed, "artifacts": entries}


def write_manifest(cfg: PipelineConfig, failed_stage: str | None = None) -> dict:
    man = build_manifest(cfg)
    if failed_stage is not None:
        man["failed_stage"] = failed_stage
    with open(cfg.workspace / "manifest.json", "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return man


def _prepare_workspace(ws: Path) -> None:
    try:
        ws.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("gen", f"cannot create workspace {ws}: {exc.strerror}") from exc
    if not os.access(ws, os.W_OK | os.X_OK):
        raise StageError("gen", f"workspace {ws} is not writable")


def run_stage(cfg: PipelineConfig, name: str):
    if name == "gen":
        _prepare_workspace(cfg.workspace)
    elif not cfg.workspace.is_dir():
        raise StageError(name, f"workspace {cfg.workspace} does not exist")
    t0 = time.time()
    try:
        out = STAGE_FUNCS[name](cfg)
    except StageError:
        raise
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        where = f" ({exc.filename})" if isinstance(exc, OSError) and exc.filename else ""
        raise StageError(name, f"{type(exc).__name__}: {exc}{where}") from exc
    logger.info("stage %s done in %.1f s", name, time.time() - t0)
    return out


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage in order and write the manifest.

    On a stage failure the manifest of what exists so far is written (when
    the workspace is usable) and the StageError propagates.
    """
    for name in STAGES:
        try:
            run_stage(cfg, name)
        except StageError as exc:
            if cfg.workspace.is_dir() and os.access(cfg.workspace, os.W_OK):
                write_manifest(cfg, failed_stage=exc.stage)
            raise
    return write_manifest(cfg)
