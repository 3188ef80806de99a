"""Pipeline stages.  Each stage reads its inputs from content-addressed
directories under an output root and writes its own directory there."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataenv as de
from . import ndgrad as nd
from . import planeval as pe
from . import reward as rw
from .config import ConfigError, ExperimentConfig
from .student import DistillConfig, train_student
from .teacher import TeacherConfig, load_model, save_model, train_teacher

log = logging.getLogger(__name__)

OUT_ENV = "RACTD_OUT"
STAGE_IDS = {"gen-data": 1, "train-teacher": 2, "train-reward": 3, "distill": 4, "eval": 5, "bench": 6}


class MissingInput(ConfigError):
    pass


def output_root(out=None) -> Path:
    return Path(out or os.environ.get(OUT_ENV, "ractd_out"))


def _h(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_rng(cfg: ExperimentConfig, stage: str):
    return np.random.default_rng([cfg.seed, STAGE_IDS[stage]])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def history_csv(path, history):
    if history:
        Path(path).write_text(pe.rows_csv(history))


@dataclass
class Layout:
    """Directory names for one config; each hash covers its upstream inputs."""

    cfg: ExperimentConfig
    root: Path
    reward_ckpt: str | None = None

    @property
    def data_hash(self):
        return self.cfg.section_hash("env", "data", "seed")

    @property
    def teacher_hash(self):
        return _h(self.data_hash, self.cfg.to_dict()["teacher"], self.teacher_reward_id())

    @property
    def reward_hash(self):
        return _h(self.data_hash, self.cfg.to_dict()["reward"])

    def teacher_reward_id(self):
        return self.reward_id() if self.cfg.teacher.reward_weight > 0 else None

    def reward_id(self):
        if self.reward_ckpt:
            return file_sha(self.reward_ckpt)
        return self.reward_hash

    @property
    def distill_hash(self):
        return _h(self.teacher_hash, self.reward_id() if self.cfg.distill.reward_weight > 0 else None,
                  self.cfg.to_dict()["distill"])

    @property
    def eval_hash(self):
        upstream = self.distill_hash if self.cfg.eval.sampler == "student" else self.teacher_hash
        return _h(upstream, self.cfg.to_dict()["eval"])

    def dir(self, stage) -> Path:
        h = {"data": self.data_hash, "teacher": self.teacher_hash, "reward": self.reward_hash,
             "distill": self.distill_hash, "eval": self.eval_hash, "bench": _h(self.distill_hash, self.cfg.to_dict()["eval"]),
             "ablate": self.cfg.hash}[stage]
        return self.root / f"{stage}-{h}"

    @property
    def dataset_path(self):
        return self.dir("data") / "dataset.jsonl"

    @property
    def teacher_path(self):
        return self.dir("teacher") / "teacher.ckpt"

    @property
    def reward_path(self):
        return Path(self.reward_ckpt) if self.reward_ckpt else self.dir("reward") / "reward.ckpt"

    @property
    def revdyn_path(self):
        return self.dir("reward") / "revdyn.ckpt"

    @property
    def student_path(self):
        return self.dir("distill") / "student.ckpt"


def _need(path, producer):
    if not Path(path).exists():
        raise MissingInput([f"missing input {path}; run `{producer}` first"])
    return path


# -- task plumbing -------------------------------------------------------------------

def env_spec(cfg: ExperimentConfig) -> de.EnvSpec:
    e = cfg.env
    kw = {} if e.behavior_noise is None else {"behavior_noise": e.behavior_noise}
    if e.dynamics == "pointmass-maze":
        return de.maze_spec(e.horizon, action_bound=e.action_bound, process_noise=e.process_noise,
                            goal_radius=e.goal_radius, **kw)
    return de.bimodal_reach_spec(horizon=e.horizon, action_bound=e.action_bound, process_noise=e.process_noise,
                                 **kw)


def training_arrays(cfg: ExperimentConfig, dataset: de.OfflineDataset):
    """Normalized (X, condition, normalizer) the generative models train on."""
    d = cfg.data
    if cfg.env.dynamics == "pointmass-maze":
        norm = de.Normalizer.from_stats(de.compute_stats(dataset))
        W, C = de.state_plan_windows(dataset, cfg.env.horizon, d.stride, d.window_every)
        return norm.states(W).reshape(len(W), -1), norm.states(C).reshape(len(C), -1), norm
    windows, norm = de.window_dataset(dataset, d.h, d.c)
    X, C = windows.flat(norm)
    return X, C, norm


def load_dataset(layout: Layout) -> de.OfflineDataset:
    return de.OfflineDataset.load(_need(layout.dataset_path, "gen-data"))


def reward_fn_for(cfg, layout, dataset, norm=None):
    if cfg.env.dynamics == "pointmass-maze":
        stats = de.compute_stats(dataset)
        return rw.plan_goal_reward(stats["state_mean"], stats["state_std"], cfg.env.goal_radius,
                                   cfg.reward.goal_temperature)
    return rw.RewardModel.load(_need(layout.reward_path, "train-reward")).as_reward_fn()


# -- stages --------------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig, layout: Layout, steps=None):
    spec = env_spec(cfg)
    mixture = cfg.data.mixture
    length = cfg.data.episode_length
    if cfg.env.dynamics == "pointmass-maze":
        mixture = [["waypoint", 1.0]] if mixture == [["expert", 0.5], ["medium", 0.5]] else mixture
        length = length or 4 * cfg.env.horizon
    ds = de.gen_offline_dataset(spec, [tuple(m) for m in mixture], cfg.data.episodes, cfg.seed, length)
    ds.meta["config_hash"] = cfg.hash
    out = layout.dir("data")
    out.mkdir(parents=True, exist_ok=True)
    ds.save(layout.dataset_path)
    r = ds.returns()
    summary = {"config_hash": cfg.hash, "episodes": len(ds.episodes), "return_mean": float(r.mean()),
               "return_min": float(r.min()), "return_max": float(r.max()),
               "sha256": file_sha(layout.dataset_path)}
    write_json(out / "summary.json", summary)
    return summary


def _teacher_cfg(cfg, steps=None):
    t = cfg.teacher
    return TeacherConfig(steps if steps is not None else t.steps, t.batch_size, t.lr, tuple(t.hidden), t.act,
                         t.n_bins, t.sigma_data, t.reward_weight, t.anneal)


def train_teacher_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    ds = load_dataset(layout)
    X, C, norm = training_arrays(cfg, ds)
    reward_fn = reward_fn_for(cfg, layout, ds) if cfg.teacher.reward_weight > 0 else None
    model, history = train_teacher(X, C, _teacher_cfg(cfg, steps), stage_rng(cfg, "train-teacher"), reward_fn)
    out = layout.dir("teacher")
    out.mkdir(parents=True, exist_ok=True)
    sha = save_model(layout.teacher_path, model, config_hash=cfg.hash)
    history_csv(out / "history.csv", history)
    summary = {"config_hash": cfg.hash, "final_loss": history[-1]["loss"] if history else None,
               "sha256": sha, "x_dim": model.x_dim, "cond_dim": model.cond_dim}
    write_json(out / "summary.json", summary)
    return summary


def train_reward_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    """Return-to-go model for reward tasks; reverse dynamics for the maze,
    whose planning reward is the analytic smoothed goal reward."""
    ds = load_dataset(layout)
    r = cfg.reward
    out = layout.dir("reward")
    out.mkdir(parents=True, exist_ok=True)
    rng = stage_rng(cfg, "train-reward")
    n = steps if steps is not None else r.steps
    if cfg.env.dynamics == "pointmass-maze":
        rd = de.train_reverse_dynamics(ds, de.RegressionConfig(tuple(r.hidden), r.act, n, r.lr), rng)
        sha = nd.save_checkpoint(layout.revdyn_path, rd.params, kind="revdyn", config_hash=cfg.hash,
                                 heldout_mse=rd.heldout_mse, norm=rd.norm.to_dict())
        summary = {"config_hash": cfg.hash, "kind": "revdyn", "heldout_mse": rd.heldout_mse, "sha256": sha}
    else:
        model = rw.train_reward(ds, cfg.data.h, rw.RewardConfig(r.gamma, tuple(r.hidden), r.act, n, r.lr,
                                                               n_actions=r.n_actions,
                                                               truncation_margin=r.truncation_margin), rng)
        sha = model.save(layout.dir("reward") / "reward.ckpt", config_hash=cfg.hash)
        summary = {"config_hash": cfg.hash, "kind": "rtg", "heldout_mse": model.heldout_mse, "sha256": sha}
    write_json(out / "summary.json", summary)
    return summary


def load_revdyn(path) -> de.ReverseDynamics:
    params, meta = nd.load_checkpoint(path)
    return de.ReverseDynamics(params, de.Normalizer(**{k: np.asarray(v) for k, v in meta["norm"].items()}),
                              meta.get("heldout_mse", float("nan")))


def _distill_cfg(cfg, steps=None):
    d = cfg.distill
    return DistillConfig(steps if steps is not None else d.steps, d.batch_size, d.lr, d.ctm_weight, d.dsm_weight,
                         d.reward_weight, d.max_gap, d.ema_decay, d.n_bins)


def distill_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    ds = load_dataset(layout)
    X, C, _ = training_arrays(cfg, ds)
    teacher, _ = load_model(_need(layout.teacher_path, "train-teacher"))
    reward_fn = reward_fn_for(cfg, layout, ds) if cfg.distill.reward_weight > 0 else None
    out = layout.dir("distill")
    out.mkdir(parents=True, exist_ok=True)
    every = cfg.distill.snapshot_every

    def snapshot(step, student, row):
        if every and (step + 1) % every == 0:
            save_model(out / f"student-{step + 1:06d}.ckpt", student, config_hash=cfg.hash)

    student, history = train_student(X, C, teacher, _distill_cfg(cfg, steps), stage_rng(cfg, "distill"), reward_fn,
                                     callback=snapshot)
    sha = save_model(layout.student_path, student, config_hash=cfg.hash,
                     teacher_sha=file_sha(layout.teacher_path),
                     reward_sha=file_sha(layout.reward_path) if reward_fn and layout.reward_path.exists() else None)
    history_csv(out / "history.csv", history)
    last = history[-1] if history else {}
    summary = {"config_hash": cfg.hash, "sha256": sha, **{k: last.get(k) for k in ("ctm", "dsm", "reward", "total")}}
    write_json(out / "summary.json", summary)
    return summary


def check_schedules(teacher_meta: dict, student_meta: dict):
    for k in ("sigma_min", "sigma_max", "rho", "sigma_data", "x_dim", "cond_dim"):
        if teacher_meta.get(k) != student_meta.get(k):
            raise ConfigError([f"teacher/student mismatch on {k}: {teacher_meta.get(k)} vs {student_meta.get(k)}"])


def build_sampler(cfg: ExperimentConfig, layout: Layout, kind=None, nfe=None):
    kind = kind or cfg.eval.sampler
    teacher, tmeta = load_model(_need(layout.teacher_path, "train-teacher"))
    if kind == "student":
        student, smeta = load_model(_need(layout.student_path, "distill"))
        check_schedules(tmeta, smeta)
        return pe.Sampler("student", student, steps=nfe or cfg.eval.nfe, name=f"student-{nfe or cfg.eval.nfe}")
    steps = {"ddpm": cfg.eval.ddpm_steps, "ddim": cfg.eval.ddim_steps}.get(kind, 1)
    return pe.Sampler(kind, teacher, steps=steps)


def reference_returns(spec: de.EnvSpec, n: int = 50, seed: int = 10 ** 6):
    """Mean returns of the random and expert scripted policies."""
    rnd = de.gen_offline_dataset(spec, [("random", 1.0)], n, seed).returns().mean()
    exp = de.gen_offline_dataset(spec, [("expert", 1.0)], n, seed + 1).returns().mean()
    return float(rnd), float(exp)


def run_evaluation(cfg: ExperimentConfig, layout: Layout, sampler, ds=None):
    """Rollouts and an EvalReport for ``sampler`` (closed loop or open loop by task)."""
    ds = ds or load_dataset(layout)
    spec = env_spec(cfg)
    _, _, norm = training_arrays(cfg, ds)
    seeds = range(cfg.eval.seeds)
    if cfg.env.dynamics == "pointmass-maze":
        rd = load_revdyn(_need(layout.revdyn_path, "train-reward"))
        planner = pe.PlanSampler(sampler, norm, spec.state_dim)
        starts = de.maze_eval_starts(spec, cfg.eval.seeds, cfg.seed)
        rolls = [pe.open_loop_rollout(planner, rd, spec, int(s), start=starts[i], stride=cfg.data.stride)
                 for i, s in enumerate(seeds)]
        report = pe.EvalReport.from_rollouts(rolls, cfg.hash, 0.0, 1.0, sampler=sampler.name)
        report.mean_score = 100.0 * report.success_rate
        return rolls, report, None
    threshold = pe.mode_threshold(spec)
    planner = pe.WindowPlanner(sampler, norm, cfg.data.h, cfg.data.c, spec.action_dim)
    rolls = pe.evaluate_closed_loop(planner, spec, seeds, cfg.data.h, threshold)
    rnd, exp = reference_returns(spec)
    report = pe.EvalReport.from_rollouts(rolls, cfg.hash, rnd, exp, sampler=sampler.name, threshold=threshold)
    hist = pe.reward_histogram(rolls, 20, threshold, (0.0, max(exp * 1.1, 1.0))) if len(rolls) >= 30 else None
    return rolls, report, hist


def select_online(cfg: ExperimentConfig, layout: Layout, sampler):
    """Evaluate every distillation snapshot and the final student; keep the best by mean return."""
    best = None
    for path in sorted(layout.dir("distill").glob("student-*.ckpt")) + [layout.student_path]:
        student, _ = load_model(path)
        cand = pe.Sampler("student", student, steps=sampler.steps, name=sampler.name)
        rolls, report, hist = run_evaluation(cfg, layout, cand)
        if best is None or report.mean_return > best[1].mean_return:
            best = (rolls, report, hist)
            report.extra["checkpoint"] = path.name
    return best


def eval_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    sampler = build_sampler(cfg, layout)
    if cfg.eval.selection == "online" and cfg.eval.sampler == "student":
        rolls, report, hist = select_online(cfg, layout, sampler)
    else:
        rolls, report, hist = run_evaluation(cfg, layout, sampler)
    out = layout.dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report.to_dict())
    (out / "rollouts.csv").write_text(pe.rollouts_csv(rolls))
    if hist is not None:
        (out / "histogram.csv").write_text(pe.histogram_csv(hist))
    return report.to_dict()


def bench_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    e = cfg.eval
    samplers = [build_sampler(cfg, layout, "ddpm"), build_sampler(cfg, layout, "ddim"),
                build_sampler(cfg, layout, "heun"), build_sampler(cfg, layout, "student", e.nfe)]
    ds = load_dataset(layout)
    _, C, _ = training_arrays(cfg, ds)
    rows = pe.benchmark(samplers, C[:1], e.bench_trials, e.bench_warmup, reference="heun")
    out = layout.dir("bench")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(pe.rows_csv(rows))
    return {"rows": rows}


STAGES = {"gen-data": gen_data, "train-teacher": train_teacher_stage, "train-reward": train_reward_stage,
          "distill": distill_stage, "eval": eval_stage, "bench": bench_stage}


# -- ablation ------------------------------------------------------------------------

CELL_KEYS = {"reward_weight": ("distill", "reward_weight"), "dsm_weight": ("distill", "dsm_weight"),
             "teacher_reward_weight": ("teacher", "reward_weight"), "h": ("data", "h"), "c": ("data", "c"),
             "nfe": ("eval", "nfe")}


def cell_config(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    from .config import with_overrides

    over: dict = {}
    for k, v in cell.items():
        if k not in CELL_KEYS:
            raise ConfigError([f"ablate: unknown cell key {k!r}"])
        sec, name = CELL_KEYS[k]
        over.setdefault(sec, {})[name] = v
    return with_overrides(cfg, **over)


def ensure(cfg: ExperimentConfig, layout: Layout, stage: str):
    """Run ``stage`` unless its output already exists (cache by content hash)."""
    target = {"gen-data": layout.dataset_path, "train-teacher": layout.teacher_path,
              "train-reward": layout.revdyn_path if cfg.env.dynamics == "pointmass-maze" else layout.reward_path,
              "distill": layout.student_path}[stage]
    if not Path(target).exists():
        STAGES[stage](cfg, layout)


def run_cell(cfg: ExperimentConfig, root: Path, cell: dict) -> dict:
    ccfg = cell_config(cfg, cell)
    lay = Layout(ccfg, root)
    ensure(ccfg, lay, "gen-data")
    needs_reward = ccfg.env.dynamics == "pointmass-maze" or ccfg.distill.reward_weight > 0 \
        or ccfg.teacher.reward_weight > 0
    if needs_reward:
        ensure(ccfg, lay, "train-reward")
    ensure(ccfg, lay, "train-teacher")
    ensure(ccfg, lay, "distill")
    _, report, _ = run_evaluation(ccfg, lay, build_sampler(ccfg, lay, "student"))
    return {"score": report.mean_score, "stderr": report.stderr_return / max(1e-12, 1.0),
            "mean_return": report.mean_return, "high_mode": report.high_mode_fraction,
            "success": report.success_rate}


def ablate_stage(cfg: ExperimentConfig, layout: Layout, steps=None):
    cells = cfg.ablate or [{"reward_weight": w} for w in (0.0, 0.1, 1.0)]
    rows = pe.ablation_suite(cells, lambda cell: run_cell(cfg, layout.root, cell))
    out = layout.dir("ablate")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(pe.rows_csv(rows))
    return {"rows": rows}


STAGES["ablate"] = ablate_stage
