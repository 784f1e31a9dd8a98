"""Experiment configuration: YAML in, validated dataclasses out.

A config file has up to eight sections. ``experiment``, ``problem``, and
``hyper`` are required; the rest apply only to particular algorithms and
are rejected elsewhere, so a file cannot silently carry dead settings.
Unknown sections and unknown keys are errors, not warnings.

``dump_config`` emits YAML that parses back to an equal ExperimentConfig,
which is what makes sweep outputs and trace headers auditable.
"""

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import yaml

from ..asyncsim import DelayModel
from ..baselines import BaselineConfig
from ..feddr import AccuracySchedule, SamplingScheme

ALGORITHMS = ("feddr", "asyncfeddr", "fedavg", "fedprox", "fedsplit")


class ConfigError(ValueError):
    """Bad config file: message names the section and field."""


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "quadratic"
    # synthetic and file
    n: int = 2
    dim: int = 2
    classes: int = 2
    r: float = 1.0
    s: float = 1.0
    samples: Tuple[int, int] = (50, 150)
    iid: bool = False
    model: str = "softmax"
    hidden: int = 16
    lipschitz_hint: float = 1.0
    path: Optional[str] = None
    # quadratic: centers ~ N(0, spread^2), common curvature ``scale``
    spread: float = 1.0
    scale: float = 1.0
    # shared
    data_seed: int = 0
    reg: str = "zero"
    reg_weight: float = 0.0


@dataclass(frozen=True)
class CertifyOptions:
    slack_tol: float = 1e-9
    strict_rho: bool = False
    f_star: Optional[float] = None
    rate: bool = True
    gamma1: Optional[float] = None
    gamma2: Optional[float] = None
    gamma4: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    algorithm: str
    rounds: int
    seeds: Tuple[int, ...]
    problem: ProblemSpec
    eta: Optional[float]          # one of eta / eta_over_L is set
    eta_over_L: Optional[float]
    alpha: float
    accuracy: AccuracySchedule
    sampling: SamplingScheme
    delay: Optional[DelayModel]
    baseline: Optional[BaselineConfig]
    certify: CertifyOptions
    certify_enabled: bool
    full_state: bool
    out_dir: Optional[str]


def _section(raw: dict, name: str, allowed: dict, source: str,
             required: Tuple[str, ...] = ()) -> dict:
    got = raw.get(name)
    if got is None:
        got = {}
    if not isinstance(got, dict):
        raise ConfigError(f"{source}: section '{name}' must be a mapping")
    for key in got:
        if key not in allowed:
            raise ConfigError(
                f"{source}: unknown key '{key}' in section '{name}' "
                f"(allowed: {', '.join(sorted(allowed))})")
    for key in required:
        if key not in got:
            raise ConfigError(f"{source}: section '{name}' requires '{key}'")
    out = dict(allowed)
    out.update(got)
    return out


_EXPERIMENT_KEYS = {"name": None, "algorithm": None, "rounds": None,
                    "seeds": None, "out_dir": None,
                    "full_state_trace": False, "certify": True}
_PROBLEM_KEYS = {"kind": "quadratic", "n": 2, "dim": 2, "classes": 2,
                 "r": 1.0, "s": 1.0, "samples": [50, 150], "iid": False,
                 "model": "softmax", "hidden": 16, "lipschitz_hint": 1.0,
                 "path": None, "spread": 1.0, "scale": 1.0, "data_seed": 0,
                 "reg": "zero", "reg_weight": 0.0}
_HYPER_KEYS = {"eta": None, "eta_over_L": None, "alpha": None}
_ACCURACY_KEYS = {"kind": "exact", "M": 1.0, "theta_hat": 0.01, "epochs": 1,
                  "lr": 0.05, "batch_size": 32}
_SAMPLING_KEYS = {"kind": "full", "size": None, "prob": 0.5, "script": None}
_DELAY_KEYS = {"kind": "uniform", "lo": 1.0, "hi": 2.0, "duration": 1.0,
               "mean": 0.0, "sigma": 0.25, "user_scale": None, "script": None,
               "cycle": False, "tau": 3, "stall_tick": 0.001}
_BASELINE_KEYS = {"epochs": 1, "lr": 0.05, "batch_size": 32, "mu": 0.0}
_CERTIFY_KEYS = {"slack_tol": 1e-9, "strict_rho": False, "f_star": None,
                 "rate": True, "gamma1": None, "gamma2": None, "gamma4": None}

_SECTIONS = ("experiment", "problem", "hyper", "accuracy", "sampling",
             "delay", "baseline", "certify")


def parse_config(raw: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section '{key}' "
                              f"(allowed: {', '.join(_SECTIONS)})")
    for name in ("experiment", "problem", "hyper"):
        if name not in raw:
            raise ConfigError(f"{source}: missing required section '{name}'")

    exp = _section(raw, "experiment", _EXPERIMENT_KEYS, source,
                   required=("algorithm", "rounds", "seeds"))
    algorithm = exp["algorithm"]
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"{source}: unknown algorithm '{algorithm}' "
                          f"(one of {', '.join(ALGORITHMS)})")
    rounds = exp["rounds"]
    if not isinstance(rounds, int) or rounds < 1:
        raise ConfigError(f"{source}: experiment.rounds must be a positive "
                          f"integer, got {rounds!r}")
    seeds = exp["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(v, int) and v >= 0 for v in seeds)):
        raise ConfigError(f"{source}: experiment.seeds must be a nonempty "
                          f"list of nonnegative integers, got {seeds!r}")
    name = exp["name"] or os.path.splitext(os.path.basename(source))[0]

    prob = _section(raw, "problem", _PROBLEM_KEYS, source, required=("kind",))
    if prob["kind"] not in ("quadratic", "synthetic", "file"):
        raise ConfigError(f"{source}: unknown problem kind '{prob['kind']}'")
    if prob["kind"] == "file" and not prob["path"]:
        raise ConfigError(f"{source}: problem.kind=file requires 'path'")
    if prob["reg"] not in ("zero", "l1"):
        raise ConfigError(f"{source}: problem.reg must be 'zero' or 'l1'")
    samples = prob["samples"]
    if (not isinstance(samples, (list, tuple)) or len(samples) != 2):
        raise ConfigError(f"{source}: problem.samples must be [lo, hi]")
    problem = ProblemSpec(
        kind=prob["kind"], n=int(prob["n"]), dim=int(prob["dim"]),
        classes=int(prob["classes"]), r=float(prob["r"]), s=float(prob["s"]),
        samples=(int(samples[0]), int(samples[1])), iid=bool(prob["iid"]),
        model=prob["model"], hidden=int(prob["hidden"]),
        lipschitz_hint=float(prob["lipschitz_hint"]), path=prob["path"],
        spread=float(prob["spread"]), scale=float(prob["scale"]),
        data_seed=int(prob["data_seed"]), reg=prob["reg"],
        reg_weight=float(prob["reg_weight"]))

    hyper = _section(raw, "hyper", _HYPER_KEYS, source)
    eta, eta_over_L = hyper["eta"], hyper["eta_over_L"]
    if (eta is None) == (eta_over_L is None):
        raise ConfigError(f"{source}: hyper needs exactly one of "
                          "'eta' and 'eta_over_L'")
    for label, v in (("eta", eta), ("eta_over_L", eta_over_L)):
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"{source}: hyper.{label} must be positive")
    alpha = hyper["alpha"]
    if algorithm == "fedsplit":
        # the alias is the alpha = 2 reflection with full participation and
        # no regularizer; anything else is a different algorithm
        if alpha is not None and alpha != 2.0:
            raise ConfigError(f"{source}: fedsplit is the alpha = 2 "
                              f"reflection; got alpha = {alpha}")
        alpha = 2.0
        if problem.reg != "zero":
            raise ConfigError(f"{source}: fedsplit requires problem.reg = "
                              "zero")
    alpha = 1.0 if alpha is None else float(alpha)
    if alpha <= 0:
        raise ConfigError(f"{source}: hyper.alpha must be positive")

    is_baseline = algorithm in ("fedavg", "fedprox")
    for sec, ok in (("accuracy", algorithm in ("feddr", "fedsplit")),
                    ("sampling", algorithm != "asyncfeddr"),
                    ("delay", algorithm == "asyncfeddr"),
                    ("baseline", is_baseline)):
        if sec in raw and not ok:
            raise ConfigError(f"{source}: section '{sec}' does not apply to "
                              f"algorithm '{algorithm}'")

    acc = _section(raw, "accuracy", _ACCURACY_KEYS, source)
    try:
        accuracy = AccuracySchedule(
            kind=acc["kind"], M=float(acc["M"]),
            theta_hat=float(acc["theta_hat"]), epochs=int(acc["epochs"]),
            lr=float(acc["lr"]), batch_size=int(acc["batch_size"]))
    except ValueError as e:
        raise ConfigError(f"{source}: accuracy: {e}") from e

    smp = _section(raw, "sampling", _SAMPLING_KEYS, source)
    if algorithm == "fedsplit" and smp["kind"] != "full":
        raise ConfigError(f"{source}: fedsplit requires full participation")
    try:
        sampling = SamplingScheme(
            kind=smp["kind"],
            size=None if smp["size"] is None else int(smp["size"]),
            prob=float(smp["prob"]),
            script=None if smp["script"] is None else
            tuple(tuple(s) for s in smp["script"]))
    except ValueError as e:
        raise ConfigError(f"{source}: sampling: {e}") from e

    delay = None
    if algorithm == "asyncfeddr":
        dl = _section(raw, "delay", _DELAY_KEYS, source)
        try:
            delay = DelayModel(
                kind=dl["kind"], lo=float(dl["lo"]), hi=float(dl["hi"]),
                duration=float(dl["duration"]), mean=float(dl["mean"]),
                sigma=float(dl["sigma"]),
                user_scale=None if dl["user_scale"] is None else
                tuple(float(v) for v in dl["user_scale"]),
                script=None if dl["script"] is None else
                tuple(tuple((float(a), float(b)) for a, b in per_user)
                      for per_user in dl["script"]),
                cycle=bool(dl["cycle"]), tau=int(dl["tau"]),
                stall_tick=float(dl["stall_tick"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: delay: {e}") from e

    baseline = None
    if is_baseline:
        bl = _section(raw, "baseline", _BASELINE_KEYS, source)
        try:
            baseline = BaselineConfig(
                algorithm=algorithm, epochs=int(bl["epochs"]),
                lr=float(bl["lr"]), batch_size=int(bl["batch_size"]),
                mu=float(bl["mu"]), sampling=sampling)
        except ValueError as e:
            raise ConfigError(f"{source}: baseline: {e}") from e

    cf = _section(raw, "certify", _CERTIFY_KEYS, source)
    certify = CertifyOptions(
        slack_tol=float(cf["slack_tol"]), strict_rho=bool(cf["strict_rho"]),
        f_star=None if cf["f_star"] is None else float(cf["f_star"]),
        rate=bool(cf["rate"]),
        gamma1=None if cf["gamma1"] is None else float(cf["gamma1"]),
        gamma2=None if cf["gamma2"] is None else float(cf["gamma2"]),
        gamma4=None if cf["gamma4"] is None else float(cf["gamma4"]))

    return ExperimentConfig(
        name=str(name), algorithm=algorithm, rounds=rounds,
        seeds=tuple(seeds), problem=problem,
        eta=None if eta is None else float(eta),
        eta_over_L=None if eta_over_L is None else float(eta_over_L),
        alpha=alpha, accuracy=accuracy, sampling=sampling, delay=delay,
        baseline=baseline, certify=certify,
        certify_enabled=bool(exp["certify"]),
        full_state=bool(exp["full_state_trace"]), out_dir=exp["out_dir"])


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if raw is None:
        raise ConfigError(f"{path}: empty config")
    return parse_config(raw, source=str(path))


def _drop_defaults(d: dict, defaults: dict) -> dict:
    return {k: v for k, v in d.items() if v != defaults.get(k, object())}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested plain-python dict; parse_config(config_to_dict(c)) == c."""
    p = cfg.problem
    out = {
        "experiment": {
            "name": cfg.name, "algorithm": cfg.algorithm,
            "rounds": cfg.rounds, "seeds": list(cfg.seeds),
            "out_dir": cfg.out_dir, "full_state_trace": cfg.full_state,
            "certify": cfg.certify_enabled,
        },
        "problem": _drop_defaults({
            "kind": p.kind, "n": p.n, "dim": p.dim, "classes": p.classes,
            "r": p.r, "s": p.s, "samples": list(p.samples), "iid": p.iid,
            "model": p.model, "hidden": p.hidden,
            "lipschitz_hint": p.lipschitz_hint, "path": p.path,
            "spread": p.spread, "scale": p.scale, "data_seed": p.data_seed,
            "reg": p.reg, "reg_weight": p.reg_weight,
        }, {**_PROBLEM_KEYS, "samples": list(_PROBLEM_KEYS["samples"])}),
        "hyper": {"eta": cfg.eta, "eta_over_L": cfg.eta_over_L,
                  "alpha": cfg.alpha},
    }
    out["problem"] = {"kind": p.kind,
                      **{k: v for k, v in out["problem"].items()
                         if k != "kind"}}
    if out["experiment"]["out_dir"] is None:
        del out["experiment"]["out_dir"]
    out["hyper"] = {k: v for k, v in out["hyper"].items() if v is not None}
    a = cfg.accuracy
    if cfg.algorithm in ("feddr", "fedsplit"):
        out["accuracy"] = {"kind": a.kind, "M": a.M,
                           "theta_hat": a.theta_hat, "epochs": a.epochs,
                           "lr": a.lr, "batch_size": a.batch_size}
    s = cfg.sampling
    if cfg.algorithm != "asyncfeddr":
        out["sampling"] = {"kind": s.kind, "size": s.size, "prob": s.prob,
                           "script": None if s.script is None else
                           [list(r) for r in s.script]}
    if cfg.delay is not None:
        d = cfg.delay
        out["delay"] = {
            "kind": d.kind, "lo": d.lo, "hi": d.hi, "duration": d.duration,
            "mean": d.mean, "sigma": d.sigma,
            "user_scale": None if d.user_scale is None else list(d.user_scale),
            "script": None if d.script is None else
            [[list(pair) for pair in per_user] for per_user in d.script],
            "cycle": d.cycle, "tau": d.tau, "stall_tick": d.stall_tick}
    if cfg.baseline is not None:
        b = cfg.baseline
        out["baseline"] = {"epochs": b.epochs, "lr": b.lr,
                           "batch_size": b.batch_size, "mu": b.mu}
    c = cfg.certify
    out["certify"] = {"slack_tol": c.slack_tol, "strict_rho": c.strict_rho,
                      "f_star": c.f_star, "rate": c.rate, "gamma1": c.gamma1,
                      "gamma2": c.gamma2, "gamma4": c.gamma4}
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False,
                          default_flow_style=None)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
