"""gridstorm command-line pipeline.

Subcommands: simulate, train-laa, falsify, validate, compare.  Every command
takes one master seed, splits it into per-stage streams, and records a run
manifest next to its outputs.  Exit codes: 0 success, 1 predicate false,
2 input error, 3 no counter-example, 4 internal invariant breach.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .falsify import (ValidationMismatch, load_attack_file, load_schedule_file,
                      save_attack, save_schedule, synthesize_and_validate)
from .model import ConfigError, load_grid_config_file
from .numerics import RngStream
from .rl import (EpisodeConfig, GridEnv, RewardWeights, TrainConfig, TrainingDiverged,
                 ddpg_train, save_weights)
from .sim import (AttackVector, BreakerSchedule, FalseDataSchedule, check_success,
                  detect, simulate, write_trace_csv)
from .svgplot import LinePlot

EXIT_OK = 0
EXIT_PREDICATE_FALSE = 1
EXIT_INPUT_ERROR = 2
EXIT_NO_COUNTEREXAMPLE = 3
EXIT_INTERNAL = 4


class _Manifest:
    def __init__(self, out_dir, config_path, seed):
        self.out_dir = out_dir
        self.data = {
            "version": __version__,
            "command_line": list(sys.argv),
            "config_sha256": _sha256_file(config_path) if config_path else None,
            "seeds": {"master": seed},
            "started": _utc_now(),
            "finished": None,
            "outputs": [],
        }

    def stage_seed(self, name, stream_id):
        self.data["seeds"][name] = {"seed": self.data["seeds"]["master"],
                                    "stream_id": stream_id}

    def add(self, path):
        self.data["outputs"].append(os.path.basename(path))
        return path

    def write(self):
        self.data["finished"] = _utc_now()
        for name in self.data["outputs"]:
            if not os.path.exists(os.path.join(self.out_dir, name)):
                raise RuntimeError(f"manifest lists missing output {name}")
        path = os.path.join(self.out_dir, "manifest.json")
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _utc_now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _plot_frequency(trace, envelope, path, basis="true", detection=None):
    plot = LinePlot("Generator frequency", "time [s]", "f [Hz]")
    plot.set_band(envelope.f_lo, envelope.f_hi)
    t = np.arange(trace.n_steps) * trace.ts
    f = trace.frequency("true" if basis == "true" else "measured")
    for i in range(trace.n_generators):
        plot.add_series(f"gen {i + 1}", t, f[i])
    if detection is not None:
        plot.add_vline(detection * trace.ts, "first alarm")
    plot.save(path)


def _plot_residue(trace, thresholds, path, detection=None):
    plot = LinePlot("Detector residue (inf-norm)", "time [s]", "||r||_inf")
    t = np.arange(trace.n_steps) * trace.ts
    for i in range(trace.n_generators):
        plot.add_series(f"gen {i + 1}", t, trace.r_inf[i])
    for i, th in enumerate(thresholds):
        plot.add_hline(th, f"Th gen {i + 1}")
    if detection is not None:
        plot.add_vline(detection * trace.ts, "first alarm")
    plot.save(path)


def _plot_power(trace, envelope, path):
    plot = LinePlot("Electrical power deviation", "time [s]", "P_e [pu]")
    plot.set_band(envelope.pe_lo, envelope.pe_hi)
    t = np.arange(trace.n_steps) * trace.ts
    for i in range(trace.n_generators):
        plot.add_series(f"gen {i + 1}", t, trace.p_e[i])
    plot.save(path)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    grid = load_grid_config_file(args.config)
    if args.horizon < 1:
        raise ConfigError("--horizon", "must be >= 1")
    attack = load_attack_file(args.attack) if args.attack else None
    out_dir = _ensure_out(args.out)
    manifest = _Manifest(out_dir, args.config, args.seed)
    manifest.stage_seed("simulate", 1)
    rng = RngStream(args.seed, 1)

    trace = simulate(grid, attack, horizon=args.horizon,
                     noise=grid.noise_enabled, rng=rng)
    first_alarm = detect(trace, grid.thresholds)
    with open(manifest.add(os.path.join(out_dir, "trace.csv")), "w",
              encoding="utf-8") as fh:
        write_trace_csv(trace, fh)
    _plot_frequency(trace, grid.envelope,
                    manifest.add(os.path.join(out_dir, "frequency.svg")),
                    basis=args.signal_basis, detection=first_alarm)
    _plot_residue(trace, grid.thresholds,
                  manifest.add(os.path.join(out_dir, "residue.svg")),
                  detection=first_alarm)
    _plot_power(trace, grid.envelope,
                manifest.add(os.path.join(out_dir, "power.svg")))

    report = check_success(trace, grid.envelope, grid.thresholds, args.signal_basis)
    _write_json(manifest.add(os.path.join(out_dir, "success_report.json")),
                report.to_dict())
    manifest.write()
    print(f"simulate: wrote {out_dir} (detection={report.first_detection}, "
          f"k_prime={report.k_prime}, truncated={trace.truncated})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-laa


def _load_train_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    known = {"episodes", "steps_per_episode", "action_repeat", "init", "weights",
             "reward_variant", "hidden", "gamma", "tau", "actor_lr", "critic_lr",
             "batch_size", "buffer_capacity", "noise_sigma", "noise_decay"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError("$", f"unknown train-config keys: {sorted(unknown)}")
    episode = EpisodeConfig(
        steps_per_episode=int(doc.get("steps_per_episode", 100)),
        episodes=int(doc.get("episodes", 50)),
        init=doc.get("init", {"type": "zero"}),
        action_repeat=int(doc.get("action_repeat", 1)),
    )
    w = doc.get("weights", {})
    weights = RewardWeights(w1=float(w.get("w1", 1.0)), w2=float(w.get("w2", 1.0)),
                            w3=float(w.get("w3", 0.25)))
    train = TrainConfig(
        hidden=tuple(doc.get("hidden", (64, 64))),
        gamma=float(doc.get("gamma", 0.99)),
        tau=float(doc.get("tau", 0.005)),
        actor_lr=float(doc.get("actor_lr", 1e-4)),
        critic_lr=float(doc.get("critic_lr", 1e-3)),
        batch_size=int(doc.get("batch_size", 64)),
        buffer_capacity=int(doc.get("buffer_capacity", 100_000)),
        noise_sigma=float(doc.get("noise_sigma", 0.2)),
        noise_decay=float(doc.get("noise_decay", 0.995)),
    )
    return episode, weights, doc.get("reward_variant", "paired"), train


def cmd_train_laa(args):
    grid = load_grid_config_file(args.config)
    episode, weights, variant, train_cfg = _load_train_config(args.train_config)
    out_dir = _ensure_out(args.out)
    manifest = _Manifest(out_dir, args.config, args.seed)
    manifest.stage_seed("train", 2)

    env = GridEnv(grid, episode, weights=weights, reward_variant=variant)
    artifacts = ddpg_train(env, train_cfg, RngStream(args.seed, 2))

    save_weights(manifest.add(os.path.join(out_dir, "actor.gsrl")), artifacts.actor)
    curve_path = manifest.add(os.path.join(out_dir, "reward_curve.csv"))
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("episode,reward\n")
        for ep, rew in enumerate(artifacts.reward_curve):
            fh.write(f"{ep},{format(rew, '.9g')}\n")
    plot = LinePlot("Episode reward", "episode", "reward")
    plot.add_series("reward", np.arange(len(artifacts.reward_curve)),
                    artifacts.reward_curve)
    plot.save(manifest.add(os.path.join(out_dir, "reward_curve.svg")))
    save_schedule(manifest.add(os.path.join(out_dir, "best_schedule.json")),
                  artifacts.best_schedule)
    manifest.write()

    curve = artifacts.reward_curve
    window = min(10, len(curve))
    ma = np.convolve(curve, np.ones(window) / window, mode="valid")
    print(f"train-laa: best episode {artifacts.best_episode} "
          f"reward {artifacts.best_reward:.3f}; moving average "
          f"{ma[0]:.3f} -> {ma[-1]:.3f}")
    if args.assert_improving and ma[-1] < ma[0]:
        print("train-laa: reward trend is not improving", file=sys.stderr)
        return EXIT_PREDICATE_FALSE
    return EXIT_OK


# ---------------------------------------------------------------------------
# falsify


def _load_falsify_config(path):
    defaults = {"range": [-0.05, 0.05], "mask": [0, 1], "control_points": 10,
                "budget": 2000, "restarts": 10, "signal_basis": "measured",
                "stealth_mode": "until_unsafe", "noise_check_seeds": 20}
    if path is None:
        return defaults
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ConfigError("$", f"unknown falsify-config keys: {sorted(unknown)}")
    defaults.update(doc)
    return defaults


def cmd_falsify(args):
    grid = load_grid_config_file(args.config)
    try:
        laa = load_schedule_file(args.laa)
    except ValueError as exc:
        raise ConfigError(args.laa, str(exc)) from None
    cfg = _load_falsify_config(args.falsify_config)
    out_dir = _ensure_out(args.out)
    manifest = _Manifest(out_dir, args.config, args.seed)
    manifest.stage_seed("falsify", 3)

    outcome = synthesize_and_validate(
        grid, laa, RngStream(args.seed, 3),
        range_lo=float(cfg["range"][0]), range_hi=float(cfg["range"][1]),
        mask=cfg["mask"], control_points=int(cfg["control_points"]),
        signal_basis=cfg["signal_basis"], stealth_mode=cfg["stealth_mode"],
        budget=int(cfg["budget"]), restarts=int(cfg["restarts"]),
        noise_check_seeds=int(cfg["noise_check_seeds"]))
    result = outcome.result

    report_path = manifest.add(os.path.join(out_dir, "falsify_report.txt"))
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"success: {result.success}\n")
        fh.write(f"best rho: {result.best_rho!r}\n")
        fh.write(f"evaluations: {result.evaluations}\n")
        if outcome.validation is not None:
            v = outcome.validation
            fh.write(f"k_prime: {v.k_prime}\nfirst_detection: {v.first_detection}\n")
            fh.write(f"noise success fraction: {outcome.noise_success_fraction}\n")
        fh.write("restarts (index, evaluations, best rho):\n")
        for h in result.history:
            tag = "zero-screen" if h.restart < 0 else f"restart {h.restart}"
            fh.write(f"  {tag}: evals={h.evaluations} rho={h.best_rho!r} "
                     f"success={h.success}\n")

    if outcome.attack is None:
        manifest.write()
        print(f"falsify: no counter-example within budget "
              f"(best rho {result.best_rho:.6g}); report at {report_path}")
        return EXIT_NO_COUNTEREXAMPLE

    provenance = {
        "seed": args.seed, "stream_id": 3, "budget": int(cfg["budget"]),
        "restarts": int(cfg["restarts"]), "rho": result.best_rho,
        "evaluations": result.evaluations,
        "noise_success_fraction": outcome.noise_success_fraction,
        "control_points": int(cfg["control_points"]),
        "signal_basis": cfg["signal_basis"],
    }
    save_attack(manifest.add(os.path.join(out_dir, "attack.json")),
                outcome.attack, float(cfg["range"][0]), float(cfg["range"][1]),
                provenance)
    manifest.write()
    v = outcome.validation
    print(f"falsify: success rho={result.best_rho:.6g} k_prime={v.k_prime} "
          f"first_detection={v.first_detection} evals={result.evaluations}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args):
    grid = load_grid_config_file(args.config)
    try:
        attack = load_attack_file(args.attack)
    except ValueError as exc:
        raise ConfigError(args.attack, str(exc)) from None
    horizon = args.horizon if args.horizon else attack.d
    trace = simulate(grid, attack, horizon=horizon, noise=False)
    reports = {
        basis: check_success(trace, grid.envelope, grid.thresholds, basis).to_dict()
        for basis in ("measured", "true")
    }
    payload = {"reports": reports, "basis": args.signal_basis,
               "horizon": horizon}
    print(json.dumps(payload, indent=1, sort_keys=True))
    ok = reports["measured" if args.signal_basis == "measured" else "true"]["success"]
    return EXIT_OK if ok else EXIT_PREDICATE_FALSE


# ---------------------------------------------------------------------------
# compare


def _mode_attack(mode, attack, n, m, b_nom):
    d = attack.d
    if mode == "combined":
        return attack
    if mode == "laa-only":
        zero_fd = FalseDataSchedule(values=np.zeros((n, d, 2)),
                                    mask=attack.false_data.mask.copy())
        return AttackVector(breakers=attack.breakers, false_data=zero_fd)
    if mode == "fdia-only":
        nominal = BreakerSchedule(signals=np.tile(b_nom, (d, 1)))
        return AttackVector(breakers=nominal, false_data=attack.false_data)
    raise ValueError(mode)


def cmd_compare(args):
    modes = [name for name, on in (("laa-only", args.laa_only),
                                   ("fdia-only", args.fdia_only),
                                   ("combined", args.combined)) if on]
    if not modes:
        raise ConfigError("--laa-only/--fdia-only/--combined",
                          "select at least one mode")
    grid = load_grid_config_file(args.config)
    try:
        attack = load_attack_file(args.attack)
    except ValueError as exc:
        raise ConfigError(args.attack, str(exc)) from None
    out_dir = _ensure_out(args.out)
    manifest = _Manifest(out_dir, args.config, args.seed)

    traces = {}
    summary = {}
    for mode in modes:
        mode_atk = _mode_attack(mode, attack, grid.n_generators, grid.n_breakers,
                                grid.load_map.b_nom)
        trace = simulate(grid, mode_atk, horizon=args.horizon, noise=False)
        traces[mode] = trace
        rep = check_success(trace, grid.envelope, grid.thresholds,
                            args.signal_basis)
        f = trace.frequency(args.signal_basis)
        in_band_end = bool(np.all((f[:, -1] >= grid.envelope.f_lo)
                                  & (f[:, -1] <= grid.envelope.f_hi)))
        ever_unsafe = bool(np.any((f < grid.envelope.f_lo) | (f > grid.envelope.f_hi)))
        summary[mode] = dict(rep.to_dict(), in_band_at_end=in_band_end,
                             ever_unsafe=ever_unsafe)

    # plot the generator with the largest excursion under the most attacked mode
    ref_mode = modes[-1]
    ref_f = traces[ref_mode].frequency(args.signal_basis)
    nominal = traces[ref_mode].nominal_hz
    gen = int(np.argmax(np.max(np.abs(ref_f - nominal[:, None]), axis=1)))

    fplot = LinePlot(f"Frequency under attack (gen {gen + 1})", "time [s]", "f [Hz]")
    fplot.set_band(grid.envelope.f_lo, grid.envelope.f_hi)
    rplot = LinePlot(f"Residue under attack (gen {gen + 1})", "time [s]", "||r||_inf")
    rplot.add_hline(grid.thresholds[gen], "Th")
    for mode in modes:
        tr = traces[mode]
        t = np.arange(tr.n_steps) * tr.ts
        fplot.add_series(mode, t, tr.frequency(args.signal_basis)[gen])
        rplot.add_series(mode, t, tr.r_inf[gen])
    fplot.save(manifest.add(os.path.join(out_dir, "compare_frequency.svg")))
    rplot.save(manifest.add(os.path.join(out_dir, "compare_residue.svg")))
    _write_json(manifest.add(os.path.join(out_dir, "compare_report.json")),
                {"modes": summary, "plotted_generator": gen,
                 "signal_basis": args.signal_basis, "horizon": args.horizon})
    manifest.write()
    for mode in modes:
        s = summary[mode]
        print(f"compare[{mode}]: success={s['success']} k_prime={s['k_prime']} "
              f"first_detection={s['first_detection']} "
              f"in_band_at_end={s['in_band_at_end']}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gridstorm",
        description="AGC grid attack-synthesis workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", required=True, help="grid config JSON")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="run the closed loop and export trace/plots")
    common(p, "out/simulate")
    p.add_argument("--attack", help="attack vector JSON")
    p.add_argument("--horizon", type=int, default=800)
    p.add_argument("--signal-basis", choices=("measured", "true"), default="measured")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-laa", help="train the breaker-schedule agent")
    common(p, "out/train")
    p.add_argument("--train-config", required=True, help="training config JSON")
    p.add_argument("--assert-improving", action="store_true",
                   help="exit nonzero unless the reward trend improves")
    p.set_defaults(func=cmd_train_laa)

    p = sub.add_parser("falsify", help="synthesize false data for a breaker schedule")
    common(p, "out/falsify")
    p.add_argument("--laa", required=True, help="breaker schedule JSON")
    p.add_argument("--falsify-config", help="falsification config JSON")
    p.set_defaults(func=cmd_falsify)

    p = sub.add_parser("validate", help="re-simulate an attack vector and report")
    common(p, None)
    p.add_argument("--attack", required=True, help="attack vector JSON")
    p.add_argument("--horizon", type=int, default=0,
                   help="simulation horizon (default: attack length)")
    p.add_argument("--signal-basis", choices=("measured", "true"), default="measured")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="overlay attack modes on one grid")
    common(p, "out/compare")
    p.add_argument("--attack", required=True, help="attack vector JSON")
    p.add_argument("--laa-only", action="store_true")
    p.add_argument("--fdia-only", action="store_true")
    p.add_argument("--combined", action="store_true")
    p.add_argument("--horizon", type=int, default=800)
    p.add_argument("--signal-basis", choices=("measured", "true"), default="measured")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gridstorm: config error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except FileNotFoundError as exc:
        print(f"gridstorm: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (ValidationMismatch, TrainingDiverged) as exc:
        print(f"gridstorm: internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except ValueError as exc:
        print(f"gridstorm: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
