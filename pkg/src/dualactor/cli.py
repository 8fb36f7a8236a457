"""Command-line entry point: ``dualactor <command> [flags]``.

Commands run in pipeline order: gen-data, train-afg, annotate, train-policy,
eval. ``ablate`` trains and evaluates the whole variant grid on one dataset
and ``report`` turns run records into a tab-separated summary.

Progress goes to stderr. Only ``report`` writes to stdout.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import afgnet, dataset, nn, policy
from .toyenv import TaskId

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING_STAGE, EXIT_EMPTY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class MissingStageError(Exception):
    def __init__(self, stage: str, path):
        super().__init__(f"missing upstream artifact {path}; run '{stage}' first")
        self.stage = stage


class EmptyInputError(Exception):
    pass


def progress(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- configuration

def load_config(path: str | None = None, overrides: list[str] = ()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_string(resources.files("dualactor").joinpath("default.ini").read_text())
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file {path} not found")
        cp.read(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not cp.has_section(section):
            raise UsageError(f"bad override {item!r}; expected section.key=value")
        cp.set(section, name, value.strip())
    return cp


def config_snapshot(cp: configparser.ConfigParser) -> dict:
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _typed(cls, section, skip=()):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name not in section:
            continue
        raw = section[f.name]
        if f.type in ("bool", bool):
            kwargs[f.name] = section.getboolean(f.name) if hasattr(section, "getboolean") else raw in ("true", "1")
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def afg_configs(cp) -> tuple[afgnet.AfgConfig, afgnet.AfgTrainConfig]:
    net = afgnet.AfgConfig(use_noise=cp["afg"].getboolean("use_noise"), n_points=cp["data"].getint("n_points"),
                           coord_scale=cp["afg"].getfloat("coord_scale"))
    return net, _typed(afgnet.AfgTrainConfig, cp["afg"])


def train_config(cp) -> policy.TrainConfig:
    section = dict(cp["policy"])
    section["alpha"] = cp["data"]["alpha"]
    return _typed(policy.TrainConfig, section)


def parse_tasks(text: str) -> list[TaskId]:
    try:
        tasks = [TaskId.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not tasks:
        raise UsageError("empty task list")
    return tasks


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- run records

def run_record(command: str, label: str, cp, seeds: dict, started: float, results=(), curves=None) -> dict:
    counts: dict[str, list[int]] = {}
    for r in results:
        c = counts.setdefault(r.task.slug, [0, 0])
        c[0] += int(r.success)
        c[1] += 1
    return {
        "command": command,
        "label": label,
        "config": config_snapshot(cp),
        "seeds": seeds,
        "wall_clock": round(time.time() - started, 3),
        "git": git_describe(),
        "success_counts": {k: {"successes": v[0], "episodes": v[1]} for k, v in counts.items()},
        "loss_curves": {k: [[int(s), float(x)] for s, x in v] for k, v in (curves or {}).items()},
        "rows": [{"task": r.task.slug, "seed": r.seed, "success": bool(r.success), "steps": r.steps,
                  "switches": r.switches} for r in results],
    }


def append_records(path, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(paths) -> list[dict]:
    records = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise EmptyInputError(f"record file {p} not found")
        for line in p.read_text().splitlines():
            if line.strip():
                records.append(json.loads(line))
    return records


# ---------------------------------------------------------------- artifacts

def _require(path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingStageError(stage, path)
    return path


def _load_dataset(path, replay: bool = False):
    _require(Path(path) / "manifest.json", "gen-data")
    return dataset.load(path, replay=replay)


def save_afg(path, params, net: afgnet.AfgConfig, cp, curve) -> None:
    nn.save_checkpoint(path, params)
    meta = {"afg": dataclasses.asdict(net), "config": config_snapshot(cp), "loss_curve": curve}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_afg(path) -> tuple[dict, afgnet.AfgConfig]:
    path = _require(path, "train-afg")
    meta_path = _require(str(path) + ".json", "train-afg")
    meta = json.loads(meta_path.read_text())
    return nn.load_checkpoint(path), afgnet.AfgConfig(**meta["afg"])


def save_policy(path, bundle: policy.PolicyBundle, afg_sha: str | None, curves) -> None:
    nn.save_checkpoint(path, bundle.checkpoint_params())
    meta = {"variant": bundle.variant.name, "policy": dataclasses.asdict(bundle.config), "afg_sha256": afg_sha,
            "loss_curves": curves}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_policy(path) -> tuple[policy.PolicyBundle, dict]:
    path = _require(path, "train-policy")
    meta = json.loads(_require(str(path) + ".json", "train-policy").read_text())
    cfg = policy.TrainConfig(**meta["policy"])
    bundle = policy.PolicyBundle.from_checkpoint(nn.load_checkpoint(path), policy.get_variant(meta["variant"]), cfg)
    return bundle, meta


# ---------------------------------------------------------------- parallel helpers

def _record_one(args):
    task, seed, cp_snapshot = args
    d = cp_snapshot["data"]
    demo = dataset.record_episode(task, seed, int(d["n_points"]), float(d["obs_noise"]))
    return dataset.annotate_ground_truth(demo, float(d["alpha"]))


_EVAL_CTX: dict = {}


def _eval_init(bundle, afg_params, afg_config, n_points, obs_noise):
    _EVAL_CTX.update(bundle=bundle, afg=afg_params, afg_config=afg_config, n_points=n_points, obs_noise=obs_noise)


def _eval_one(args):
    task, seed = args
    c = _EVAL_CTX
    return policy.rollout(c["bundle"], c["afg"], c["afg_config"], task, seed, n_points=c["n_points"],
                          obs_noise=c["obs_noise"])


def _map(fn, items, jobs: int, initializer=None, initargs=()):
    """Ordered map; results come back in input order whatever the completion order."""
    if jobs <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(jobs, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items))


def evaluate(bundle, afg_params, afg_config, tasks, episodes: int, seed: int, cp, jobs: int = 1):
    items = [(t, seed + i) for t in tasks for i in range(episodes)]
    return _map(_eval_one, items, jobs, _eval_init,
                (bundle, afg_params, afg_config, cp["data"].getint("n_points"), cp["data"].getfloat("obs_noise")))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cp) -> int:
    tasks = parse_tasks(args.tasks or cp["data"]["tasks"])
    episodes = args.episodes if args.episodes is not None else cp["data"].getint("episodes")
    seed = args.seed if args.seed is not None else cp["data"].getint("seed")
    if episodes < 1:
        raise UsageError("--episodes must be at least 1")
    cp["data"].update(tasks=",".join(t.slug for t in tasks), episodes=str(episodes), seed=str(seed))
    snapshot = config_snapshot(cp)
    items = [(t, seed + i, snapshot) for t in tasks for i in range(episodes)]
    demos = _map(_record_one, items, args.jobs)
    dataset.save(demos, args.out, snapshot)
    for t in tasks:
        ok = sum(d.success for d in demos if d.task_id is t)
        progress(f"{t.slug}: expert success {ok}/{episodes}")
    return EXIT_OK


def afg_data(demos, tasks=None) -> afgnet.AfgData:
    use = [d for d in demos if d.success and (tasks is None or d.task_id in tasks)]
    frames = [(d, f) for d in use for f in d.frames]
    if not frames:
        raise EmptyInputError("no successful annotated episodes")
    return afgnet.AfgData(
        obs=np.stack([f.obs.points for _, f in frames]).astype(np.float32),
        task=np.array([int(d.task_id) for d, _ in frames]),
        affordance=np.stack([f.gt_affordance for _, f in frames]).astype(np.float32),
        flow=np.stack([f.gt_flow for _, f in frames]).astype(np.float32),
    )


def cmd_train_afg(args, cp) -> int:
    if args.steps is not None:
        cp["afg"]["steps"] = str(args.steps)
    demos, _ = _load_dataset(args.data)
    net, train = afg_configs(cp)
    params, curve = afgnet.train_afg(afg_data(demos), net, train, progress=progress, log_every=100)
    save_afg(args.out, params, net, cp, curve)
    return EXIT_OK


def cmd_annotate(args, cp) -> int:
    demos, manifest = _load_dataset(args.data)
    params, net = load_afg(args.afg)
    seed = cp["afg"].getint("seed")
    out = []
    for i, demo in enumerate(demos):
        out.append(dataset.annotate_with_afg(demo, params, net, seed, cp["afg"].getint("sample_steps")))
        if (i + 1) % 20 == 0:
            progress(f"annotated {i + 1}/{len(demos)}")
    config = dict(manifest.config)
    config["annotation"] = {"afg_sha256": sha256_file(args.afg), "seed": seed}
    dataset.save(out, args.out or args.data, config)
    return EXIT_OK


def _windows(args, cp, demos, manifest):
    use_gt = bool(getattr(args, "use_gt_priors", False))
    if not use_gt and "annotation" not in manifest.config:
        raise MissingStageError("annotate", Path(args.data) / "manifest.json (no predicted priors)")
    cfg = train_config(cp)
    return dataset.build_windows(demos, dataset.BatchSpec(cfg.batch_size, cfg.horizon, use_gt_priors=use_gt)), cfg


def cmd_train_policy(args, cp) -> int:
    demos, manifest = _load_dataset(args.data)
    windows, cfg = _windows(args, cp, demos, manifest)
    log = policy.TrainLog()
    bundle = policy.train_policy(windows, args.variant, cfg, log=log, progress=progress)
    afg_sha = manifest.config.get("annotation", {}).get("afg_sha256")
    save_policy(args.out, bundle, afg_sha, log.curves)
    return EXIT_OK


def cmd_eval(args, cp) -> int:
    started = time.time()
    bundle, meta = load_policy(args.policy)
    afg_params, afg_config = load_afg(args.afg) if bundle.variant.needs_priors else (None, afgnet.AfgConfig())
    tasks = parse_tasks(args.tasks or cp["eval"]["tasks"])
    episodes = args.episodes if args.episodes is not None else cp["eval"].getint("episodes")
    seed = args.seed if args.seed is not None else cp["eval"].getint("seed")
    if episodes < 1:
        raise UsageError("--episodes must be at least 1")
    results = evaluate(bundle, afg_params, afg_config, tasks, episodes, seed, cp, args.jobs)
    rec = run_record("eval", bundle.variant.name, cp, {"eval": seed, "policy": bundle.config.seed}, started,
                     results, meta.get("loss_curves"))
    append_records(args.out, [rec])
    for task, c in rec["success_counts"].items():
        progress(f"{bundle.variant.name} {task}: {c['successes']}/{c['episodes']}")
    return EXIT_OK


def cmd_ablate(args, cp) -> int:
    demos, manifest = _load_dataset(args.data)
    windows, cfg = _windows(args, cp, demos, manifest)
    variants = [policy.get_variant(v) for v in (args.variants.split(",") if args.variants
                                                else list(policy.VARIANTS))]
    afg_params, afg_config = load_afg(args.afg) if any(v.needs_priors for v in variants) \
        else (None, afgnet.AfgConfig())
    tasks = parse_tasks(args.tasks or cp["eval"]["tasks"])
    episodes = args.episodes if args.episodes is not None else cp["eval"].getint("episodes")
    seed = args.seed if args.seed is not None else cp["eval"].getint("seed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    decision_log = policy.TrainLog()
    decision = None
    if any(v.dual for v in variants):
        decision = policy.train_decision(windows, cfg, decision_log, progress)
    records = []
    for v in variants:
        started = time.time()
        log = policy.TrainLog(dict(decision_log.curves) if v.dual else {})
        bundle = policy.train_policy(windows, v, cfg, decision=decision, log=log, progress=progress)
        save_policy(out / f"{v.name}.dpc", bundle, manifest.config.get("annotation", {}).get("afg_sha256"),
                    log.curves)
        results = evaluate(bundle, afg_params, afg_config, tasks, episodes, seed, cp, args.jobs)
        rec = run_record("ablate", v.name, cp, {"eval": seed, "policy": cfg.seed}, started, results, log.curves)
        records.append(rec)
        ok = sum(r.success for r in results)
        progress(f"{v.name}: {ok}/{len(results)}")
    (out / "records.jsonl").unlink(missing_ok=True)
    append_records(out / "records.jsonl", records)
    (out / "ablation.tsv").write_text(summary_table(records))
    return EXIT_OK


def summary_rows(records: list[dict]) -> list[tuple[str, str, int, int]]:
    """(label, task, successes, episodes) with counts summed over records; task 'all' pools every task."""
    totals: dict[tuple[str, str], list[int]] = {}
    for rec in records:
        for task, c in rec.get("success_counts", {}).items():
            for key in ((rec["label"], task), (rec["label"], "all")):
                t = totals.setdefault(key, [0, 0])
                t[0] += c["successes"]
                t[1] += c["episodes"]
    return [(label, task, s, n) for (label, task), (s, n) in totals.items()]


def summary_table(records: list[dict]) -> str:
    lines = ["label\ttask\tepisodes\tsuccesses\tsuccess_rate"]
    for label, task, s, n in summary_rows(records):
        lines.append(f"{label}\t{task}\t{n}\t{s}\t{s / n:.3f}" if n else f"{label}\t{task}\t0\t0\tnan")
    return "\n".join(lines) + "\n"


def cmd_report(args, cp) -> int:
    records = read_records(args.records)
    if not records:
        raise EmptyInputError("no run records in input")
    table = summary_table(records)
    out = Path(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "summary.tsv").write_text(table)
    for i, rec in enumerate(records):
        for name, points in rec.get("loss_curves", {}).items():
            body = "step\tloss\n" + "".join(f"{s}\t{v!r}\n" for s, v in points)
            (out / "curves" / f"{i:03d}_{rec['label']}_{name}.tsv").write_text(body)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualactor", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file overriding the packaged defaults")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="record and annotate expert demonstrations")
    g.add_argument("--tasks")
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)

    a = sub.add_parser("train-afg", help="train the affordance/flow generator")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int)

    n = sub.add_parser("annotate", help="add predicted priors to a dataset")
    n.add_argument("--data", required=True)
    n.add_argument("--afg", required=True)
    n.add_argument("--out", help="output directory (default: rewrite in place)")

    t = sub.add_parser("train-policy", help="train one policy variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", default="full", choices=sorted(policy.VARIANTS))
    t.add_argument("--use-gt-priors", action="store_true", help="train on ground-truth priors")

    e = sub.add_parser("eval", help="roll out a trained policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--afg", required=True)
    e.add_argument("--tasks")
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True, help="run-record file (appended)")
    e.add_argument("--jobs", type=int, default=1)

    b = sub.add_parser("ablate", help="train and evaluate every variant")
    b.add_argument("--data", required=True)
    b.add_argument("--afg", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--variants", help="comma-separated subset (default: all six)")
    b.add_argument("--tasks")
    b.add_argument("--episodes", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--use-gt-priors", action="store_true")

    r = sub.add_parser("report", help="summarise run records")
    r.add_argument("--records", nargs="+", required=True)
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-afg": cmd_train_afg, "annotate": cmd_annotate,
            "train-policy": cmd_train_policy, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        cp = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cp)
    except UsageError as exc:
        progress(f"usage error: {exc}")
        return EXIT_USAGE
    except MissingStageError as exc:
        progress(f"error: {exc}")
        return EXIT_MISSING_STAGE
    except EmptyInputError as exc:
        progress(f"error: {exc}")
        return EXIT_EMPTY
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-error code
        progress(f"error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
