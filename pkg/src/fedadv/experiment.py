"""Config-driven experiment runner.

A plan fixes the synthetic task, the federation, the CRN accumulators, and a
list of attack settings. Running it trains one federation per (seed,
adversary position), snapshots the CRN state, crafts every attack on the
adversary's received final model, and scores the result against every
client's model. Everything derives from the base seed, so two runs of the
same plan write byte-identical metric files; wall-clock readings are
confined to `timings.csv` and `attack_table.csv`.

Config files are INI-style `key = value` with `[section]` headers. Unknown
sections or keys are errors. Defaults (also produced by an empty file):

    [data]        kind=bars classes=3 size=16 n_train=600 noise_sd=0.45
                  skew=0.5 test_per_client=100 eval_size=150
    [model]       arch=<stock conv-pool stack>
    [federation]  clients=3 rounds=15 local_epochs=2 lr=0.05 batch=32
                  clip_bound= client_noise_sd=0.005 server_noise_sd=0.02
                  sample_fraction=1.0 beta=
    [crn]         windows=5 10  eps=0.05 inner_steps=<local_epochs>
                  step_size=0.01 mode=accumulate
    [attacks]     specs=<method,eps,alpha,iters,init[,window]; ...>
    [experiment]  repeats=3 base_seed=1 cycle_adversary=true adversary=0

An empty `clip_bound`/`beta` means unset.
"""

import configparser
import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, craft
from .crn import CrnConfig
from .datasets import gen_synthetic, partition_noniid
from .federation import FedConfig, run_federation, write_round_log
from .metrics import asr, evaluate_batch
from .model import (
    default_architecture,
    format_architecture,
    parse_architecture,
)
from .rng import derive_rng

__all__ = [
    "DataConfig",
    "AttackSpec",
    "ExperimentPlan",
    "ConfigError",
    "parse_config",
    "parse_config_text",
    "serialize_config",
    "preset_plan",
    "PRESETS",
    "EPS_GRID",
    "ALPHA_GRID",
    "run_experiment",
    "summarize_rows",
    "write_report",
]

log = logging.getLogger(__name__)

EPS_GRID = (0.01, 0.02, 0.03, 0.05, 0.07)
ALPHA_GRID = (0.001, 0.005, 0.007)
PRESETS = ("efficiency_desk", "method_grid", "eps_sweep", "alpha_sweep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "bars"
    classes: int = 3
    size: int = 16
    n_train: int = 600
    noise_sd: float = 0.45
    skew: float = 0.5
    test_per_client: int = 100
    eval_size: int = 150

    def __post_init__(self):
        if self.kind not in ("bars", "blobs"):
            raise ConfigError(f"data.kind must be bars or blobs, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("data.classes must be >= 2")
        if self.size < self.classes:
            raise ConfigError("data.size must be >= data.classes")
        for key in ("n_train", "test_per_client", "eval_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"data.{key} must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("data.noise_sd must be >= 0")
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError("data.skew must be in [0, 1]")


@dataclass(frozen=True)
class AttackSpec:
    method: str
    eps: float
    alpha: float
    iters: int
    init: str
    crn_window: int | None = None

    def __post_init__(self):
        AttackConfig(self.method, self.eps, self.alpha, self.iters, self.init)
        if self.method == "fgsm" and self.iters != 1:
            raise ConfigError("fgsm is single-step; iters must be 1")
        if (self.init == "crn") != (self.crn_window is not None):
            raise ConfigError("init=crn requires a window and vice versa")

    @property
    def label(self) -> str:
        base = self.method if self.method == "fgsm" else f"{self.method}-{self.iters}"
        return f"{base}+crn{self.crn_window}" if self.init == "crn" else base

    def to_attack_config(self, seed: int) -> AttackConfig:
        return AttackConfig(self.method, self.eps, self.alpha, self.iters,
                            self.init, seed=seed)

    def serialize(self) -> str:
        parts = [self.method, repr(self.eps), repr(self.alpha), str(self.iters),
                 self.init]
        if self.crn_window is not None:
            parts.append(str(self.crn_window))
        return ",".join(parts)

    @staticmethod
    def parse(text: str) -> "AttackSpec":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (5, 6):
            raise ConfigError(f"attack spec {text!r}: expected "
                              "method,eps,alpha,iters,init[,window]")
        window = int(parts[5]) if len(parts) == 6 else None
        try:
            return AttackSpec(parts[0], float(parts[1]), float(parts[2]),
                              int(parts[3]), parts[4], window)
        except ValueError as exc:
            raise ConfigError(f"attack spec {text!r}: {exc}") from exc


@dataclass
class ExperimentPlan:
    data: DataConfig = field(default_factory=DataConfig)
    arch_text: str = ""
    fed: FedConfig = field(default_factory=FedConfig)
    crn: tuple[CrnConfig, ...] = (CrnConfig(window=5), CrnConfig(window=10))
    attacks: tuple[AttackSpec, ...] = (
        AttackSpec("fgsm", 0.05, 0.05, 1, "zero"),
        AttackSpec("pgd", 0.05, 0.005, 10, "random_uniform"),
        AttackSpec("pgd", 0.05, 0.005, 1, "crn", 10),
    )
    repeats: int = 3
    base_seed: int = 1
    cycle_adversary: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("experiment.repeats must be >= 1")
        if not self.attacks:
            raise ConfigError("attack list must be non-empty")
        if not self.crn and any(a.init == "crn" for a in self.attacks):
            raise ConfigError("crn-initialized attacks need at least one window")
        windows = [c.window for c in self.crn]
        if len(set(windows)) != len(windows):
            raise ConfigError("duplicate CRN windows")
        for a in self.attacks:
            if a.crn_window is not None and a.crn_window not in windows:
                raise ConfigError(f"attack wants CRN window {a.crn_window}, "
                                  f"plan only accumulates {sorted(windows)}")

    def architecture(self):
        shape = (1, self.data.size, self.data.size)
        if self.arch_text:
            arch = parse_architecture(self.arch_text, shape)
            if arch.class_count != self.data.classes:
                raise ConfigError(f"model.arch ends in dense({arch.class_count}) "
                                  f"but data.classes is {self.data.classes}")
            return arch
        return default_architecture(shape, self.data.classes)

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.repeats)]

    @property
    def adversary_positions(self) -> list[int]:
        if self.cycle_adversary:
            return list(range(self.fed.clients))
        return [self.fed.adversary_id if self.fed.adversary_id is not None else 0]

    @property
    def scenario_count(self) -> int:
        return len(self.seeds) * len(self.adversary_positions) * len(self.attacks)


_SCHEMA = {
    "data": ("kind", "classes", "size", "n_train", "noise_sd", "skew",
             "test_per_client", "eval_size"),
    "model": ("arch",),
    "federation": ("clients", "rounds", "local_epochs", "lr", "batch",
                   "clip_bound", "client_noise_sd", "server_noise_sd",
                   "sample_fraction", "beta", "dp_epsilon", "dp_delta", "dp_mu"),
    "crn": ("windows", "eps", "inner_steps", "step_size", "mode"),
    "attacks": ("specs",),
    "experiment": ("repeats", "base_seed", "cycle_adversary", "adversary"),
}


class _Section:
    """Typed reads from one config section with named range errors."""

    def __init__(self, cp, name):
        self.name = name
        self.raw = dict(cp[name]) if cp.has_section(name) else {}

    def _get(self, key, default):
        # non-destructive: the crn section is read once per window
        return self.raw.get(key, default)

    def str_(self, key, default):
        v = self._get(key, default)
        return v.strip() if isinstance(v, str) else v

    def int_(self, key, default):
        v = self._get(key, None)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected integer, got {v!r}") from None

    def float_(self, key, default):
        v = self._get(key, None)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected number, got {v!r}") from None

    def opt_float(self, key):
        v = self._get(key, None)
        if v is None or v.strip() == "":
            return None
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected number, got {v!r}") from None

    def opt_int(self, key):
        v = self._get(key, None)
        if v is None or v.strip() == "":
            return None
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{self.name}.{key}: expected integer, got {v!r}") from None

    def bool_(self, key, default):
        v = self._get(key, None)
        if v is None:
            return default
        low = v.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.name}.{key}: expected boolean, got {v!r}")


def parse_config_text(text: str) -> ExperimentPlan:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]; known: "
                              f"{sorted(_SCHEMA)}")
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; known: "
                                  f"{list(_SCHEMA[section])}")

    d = _Section(cp, "data")
    try:
        data = DataConfig(kind=d.str_("kind", "bars"),
                          classes=d.int_("classes", 3),
                          size=d.int_("size", 16),
                          n_train=d.int_("n_train", 600),
                          noise_sd=d.float_("noise_sd", 0.45),
                          skew=d.float_("skew", 0.5),
                          test_per_client=d.int_("test_per_client", 100),
                          eval_size=d.int_("eval_size", 150))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    m = _Section(cp, "model")
    arch_text = m.str_("arch", "")
    if arch_text:
        try:
            shape = (1, data.size, data.size)
            arch_text = format_architecture(parse_architecture(arch_text, shape))
        except ValueError as exc:
            raise ConfigError(f"model.arch: {exc}") from exc

    f = _Section(cp, "federation")
    try:
        fed = FedConfig(clients=f.int_("clients", 3),
                        rounds=f.int_("rounds", 15),
                        local_epochs=f.int_("local_epochs", 2),
                        lr=f.float_("lr", 0.05),
                        batch=f.int_("batch", 32),
                        clip_bound=f.opt_float("clip_bound"),
                        client_noise_sd=f.float_("client_noise_sd", 0.005),
                        server_noise_sd=f.float_("server_noise_sd", 0.02),
                        sample_fraction=f.float_("sample_fraction", 1.0),
                        beta=f.opt_int("beta"),
                        dp_epsilon=f.opt_float("dp_epsilon"),
                        dp_delta=f.opt_float("dp_delta"),
                        dp_mu=f.opt_float("dp_mu"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    c = _Section(cp, "crn")
    windows_text = c.str_("windows", "5 10")
    try:
        windows = tuple(int(w) for w in windows_text.split())
    except ValueError:
        raise ConfigError(f"crn.windows: expected integers, got {windows_text!r}") from None
    try:
        crn = tuple(CrnConfig(eps=c.float_("eps", 0.05), window=w,
                              inner_steps=c.int_("inner_steps", fed.local_epochs),
                              step_size=c.float_("step_size", 0.01),
                              mode=c.str_("mode", "accumulate"))
                    for w in windows)
    except ValueError as exc:
        raise ConfigError(f"crn: {exc}") from exc

    a = _Section(cp, "attacks")
    specs_text = a.str_("specs", "")
    if specs_text:
        attacks = tuple(AttackSpec.parse(s) for s in specs_text.split(";")
                        if s.strip())
        if not attacks:
            raise ConfigError("attacks.specs is present but empty")
    else:
        attacks = ExperimentPlan.__dataclass_fields__["attacks"].default

    e = _Section(cp, "experiment")
    repeats = e.int_("repeats", 3)
    base_seed = e.int_("base_seed", 1)
    cycle = e.bool_("cycle_adversary", True)
    adversary = e.int_("adversary", 0)

    if not cycle:
        fed = replace(fed, adversary_id=adversary)
    try:
        return ExperimentPlan(data=data, arch_text=arch_text, fed=fed, crn=crn,
                              attacks=attacks, repeats=repeats,
                              base_seed=base_seed, cycle_adversary=cycle)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentPlan:
    with open(path, "r") as fh:
        return parse_config_text(fh.read())


def _opt(v) -> str:
    return "" if v is None else repr(v)


def serialize_config(plan: ExperimentPlan) -> str:
    """Render a plan as config text; parsing it back gives an equal plan."""
    crn0 = plan.crn[0] if plan.crn else CrnConfig()
    lines = [
        "[data]",
        f"kind = {plan.data.kind}",
        f"classes = {plan.data.classes}",
        f"size = {plan.data.size}",
        f"n_train = {plan.data.n_train}",
        f"noise_sd = {plan.data.noise_sd!r}",
        f"skew = {plan.data.skew!r}",
        f"test_per_client = {plan.data.test_per_client}",
        f"eval_size = {plan.data.eval_size}",
        "",
        "[model]",
        f"arch = {plan.arch_text}",
        "",
        "[federation]",
        f"clients = {plan.fed.clients}",
        f"rounds = {plan.fed.rounds}",
        f"local_epochs = {plan.fed.local_epochs}",
        f"lr = {plan.fed.lr!r}",
        f"batch = {plan.fed.batch}",
        f"clip_bound = {_opt(plan.fed.clip_bound)}",
        f"client_noise_sd = {plan.fed.client_noise_sd!r}",
        f"server_noise_sd = {plan.fed.server_noise_sd!r}",
        f"sample_fraction = {plan.fed.sample_fraction!r}",
        f"beta = {_opt(plan.fed.beta)}",
        f"dp_epsilon = {_opt(plan.fed.dp_epsilon)}",
        f"dp_delta = {_opt(plan.fed.dp_delta)}",
        f"dp_mu = {_opt(plan.fed.dp_mu)}",
        "",
        "[crn]",
        f"windows = {' '.join(str(c.window) for c in plan.crn)}",
        f"eps = {crn0.eps!r}",
        f"inner_steps = {crn0.inner_steps}",
        f"step_size = {crn0.step_size!r}",
        f"mode = {crn0.mode}",
        "",
        "[attacks]",
        f"specs = {'; '.join(a.serialize() for a in plan.attacks)}",
        "",
        "[experiment]",
        f"repeats = {plan.repeats}",
        f"base_seed = {plan.base_seed}",
        f"cycle_adversary = {str(plan.cycle_adversary).lower()}",
        f"adversary = {plan.fed.adversary_id if plan.fed.adversary_id is not None else 0}",
        "",
    ]
    return "\n".join(lines)


def preset_plan(name: str) -> ExperimentPlan:
    """Canned plans: a step-budget comparison, a method-by-window grid,
    and one sweep per attack knob."""
    if name == "efficiency_desk":
        attacks = (AttackSpec("pgd", 0.05, 0.005, 1, "crn", 10),
                   AttackSpec("pgd", 0.05, 0.005, 20, "random_uniform"),
                   AttackSpec("pgd", 0.05, 0.005, 40, "random_uniform"))
    elif name == "method_grid":
        def vanilla(m):
            return "zero" if m in ("fgsm", "bim") else "random_uniform"

        attacks = tuple(
            AttackSpec(m, 0.05, 0.005, 1 if m == "fgsm" else 10,
                       "crn" if w else vanilla(m), w)
            for m in ("fgsm", "bim", "pgd") for w in (None, 5, 10))
    elif name == "eps_sweep":
        attacks = tuple(AttackSpec(m, e, 0.005, 1 if m == "fgsm" else 10,
                                   "zero" if m == "fgsm" else "random_uniform")
                        for m in ("fgsm", "pgd") for e in EPS_GRID)
    elif name == "alpha_sweep":
        attacks = tuple(AttackSpec("pgd", 0.05, a, 10, "random_uniform")
                        for a in ALPHA_GRID)
    else:
        raise ConfigError(f"unknown preset {name!r}; known: {PRESETS}")
    return ExperimentPlan(attacks=attacks)


def _build_task(plan: ExperimentPlan, seed: int):
    d = plan.data
    shape = (1, d.size, d.size)
    train = gen_synthetic(d.kind, d.classes, d.n_train, shape, d.noise_sd,
                          derive_rng(seed, "data-train"))
    eval_set = gen_synthetic(d.kind, d.classes, d.eval_size, shape, d.noise_sd,
                             derive_rng(seed, "data-eval"))
    tests = [gen_synthetic(d.kind, d.classes, d.test_per_client, shape,
                           d.noise_sd, derive_rng(seed, "data-test", i))
             for i in range(plan.fed.clients)]
    part = partition_noniid(train, plan.fed.clients, d.skew,
                            derive_rng(seed, "partition"))
    return train, part, eval_set, tests


_RESULT_COLUMNS = ["seed", "adversary", "target", "method", "eps", "alpha",
                   "iters", "init", "crn_window", "n", "asr", "acc_clean",
                   "acc_adv", "dn", "transfer_flips", "transfer_rate"]
_TIMING_COLUMNS = ["seed", "adversary", "method", "eps", "alpha", "iters",
                   "init", "crn_window", "seconds", "seconds_per_iter"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(plan: ExperimentPlan, out_dir) -> dict:
    """Execute the plan; returns the manifest dict (also written as JSON)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    arch = plan.architecture()
    result_rows: list[list] = []
    timing_rows: list[list] = []
    scenario_summaries: list[dict] = []
    failures: list[dict] = []

    for seed in plan.seeds:
        for adv in plan.adversary_positions:
            fed_cfg = replace(plan.fed, seed=seed, adversary_id=adv)
            try:
                train, part, eval_set, tests = _build_task(plan, seed)
                state = run_federation(fed_cfg, arch, train, part,
                                       eval_set=eval_set,
                                       attack_test=tests[adv],
                                       crn_configs=plan.crn)
            except Exception as exc:
                log.error("federation seed=%d adversary=%d failed: %s",
                          seed, adv, exc)
                for spec in plan.attacks:
                    failures.append({"seed": seed, "adversary": adv,
                                     "attack": spec.label,
                                     "stage": "federation", "error": str(exc)})
                continue
            write_round_log(state, os.path.join(
                out_dir, f"round_log_seed{seed}_adv{adv}.csv"))
            test = tests[adv]
            for spec in plan.attacks:
                try:
                    rows, t_row = _run_scenario(plan, arch, state, spec, seed,
                                                adv, test)
                except Exception as exc:
                    log.error("attack %s seed=%d adversary=%d failed: %s",
                              spec.label, seed, adv, exc)
                    failures.append({"seed": seed, "adversary": adv,
                                     "attack": spec.label, "stage": "attack",
                                     "error": str(exc)})
                    continue
                result_rows.extend(rows)
                timing_rows.append(t_row)
                scenario_summaries.append(_scenario_summary(spec, seed, adv,
                                                            rows))

    _write_csv(f"{out_dir}/results.csv", _RESULT_COLUMNS, result_rows)
    with open(f"{out_dir}/scenarios.json", "w") as fh:
        json.dump(scenario_summaries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(f"{out_dir}/timings.csv", _TIMING_COLUMNS, timing_rows)
    with open(f"{out_dir}/config.ini", "w") as fh:
        fh.write(serialize_config(plan))
    write_report(out_dir)

    manifest = {
        "format_version": 1,
        "config": serialize_config(plan),
        "scenarios_planned": plan.scenario_count,
        "scenarios_completed": plan.scenario_count - len(failures),
        "failures": failures,
        "outputs": sorted([p for p in os.listdir(out_dir)
                           if p.endswith((".csv", ".ini"))] + ["scenarios.json"]),
    }
    with open(f"{out_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failures:
        with open(f"{out_dir}/failures.json", "w") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def _run_scenario(plan, arch, state, spec: AttackSpec, seed, adv, test):
    crn_state = None
    if spec.init == "crn":
        crn_state = state.crn[spec.crn_window]
    cfg = spec.to_attack_config(seed)
    batch = craft(arch, state.client_params[adv], test.images, test.labels,
                  cfg, crn_state)
    records = [evaluate_batch(arch, state.client_params[t], batch, t,
                              is_adversary=(t == adv))
               for t in range(plan.fed.clients)]
    adv_rec = records[adv]
    selected = np.flatnonzero(adv_rec.pre_labels != adv_rec.post_labels)
    setting = [spec.method, spec.eps, spec.alpha, spec.iters, spec.init,
               spec.crn_window]
    rows = []
    for t, rec in enumerate(records):
        acc_clean = float(np.mean(rec.pre_labels == rec.true_labels))
        acc_adv = float(np.mean(rec.post_labels == rec.true_labels))
        dn = flips = rate = None
        if t != adv and selected.size:
            correct = rec.pre_labels[selected] == rec.true_labels[selected]
            dn_idx = selected[correct]
            dn = int(dn_idx.size)
            if dn:
                flips = int(np.sum(rec.pre_labels[dn_idx] != rec.post_labels[dn_idx]))
                rate = flips / dn
        rows.append([seed, adv, t] + setting +
                    [test.images.shape[0], asr(rec), acc_clean, acc_adv,
                     dn, flips, rate])
    timing = [seed, adv] + setting + [batch.seconds, batch.seconds / spec.iters]
    return rows, timing


def _scenario_summary(spec: AttackSpec, seed: int, adv: int,
                      rows: list[list]) -> dict:
    """One JSON record per (seed, adversary, attack) scenario."""
    asr_i = _RESULT_COLUMNS.index("asr")
    tgt_i = _RESULT_COLUMNS.index("target")
    rate_i = _RESULT_COLUMNS.index("transfer_rate")
    clean_i = _RESULT_COLUMNS.index("acc_clean")
    adv_i = _RESULT_COLUMNS.index("acc_adv")
    benign = [r for r in rows if r[tgt_i] != adv]
    rates = [r[rate_i] for r in benign if r[rate_i] is not None]
    return {
        "seed": seed,
        "adversary": adv,
        "attack": spec.label,
        "method": spec.method,
        "eps": spec.eps,
        "alpha": spec.alpha,
        "iters": spec.iters,
        "init": spec.init,
        "crn_window": spec.crn_window,
        "asr_adversary": rows[adv][asr_i],
        "aasr_all": float(np.mean([r[asr_i] for r in rows])),
        "aasr_benign": (float(np.mean([r[asr_i] for r in benign]))
                        if benign else None),
        "aetr": float(np.mean(rates)) if rates else None,
        "acc_clean": float(np.mean([r[clean_i] for r in rows])),
        "acc_adv": float(np.mean([r[adv_i] for r in rows])),
    }


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _attack_key(row: dict):
    return (row["method"], row["eps"], row["alpha"], row["iters"],
            row["init"], row["crn_window"])


def _attack_label(key) -> str:
    method, eps, alpha, iters, init, window = key
    base = method if method == "fgsm" else f"{method}-{iters}"
    return f"{base}+crn{window}" if init == "crn" else base


def summarize_rows(rows: list[dict]):
    """Aggregate per-target result rows.

    Produces one entry per (group, attack setting) where group is "overall"
    plus per-seed and per-adversary breakdowns. AASR is the mean per-target
    flip rate (all targets, and benign targets only); AETR averages the
    per-scenario mean transfer rate over scenarios where it is defined.
    """
    groups = {}
    for row in rows:
        keys = [("overall",), (f"seed={row['seed']}",),
                (f"adversary={row['adversary']}",)]
        for g in keys:
            groups.setdefault(g[0], []).append(row)
    out = []
    for gname in sorted(groups, key=_group_order):
        grows = groups[gname]
        by_attack = {}
        for row in grows:
            by_attack.setdefault(_attack_key(row), []).append(row)
        for key in sorted(by_attack, key=_attack_order):
            arows = by_attack[key]
            asr_all = [float(r["asr"]) for r in arows]
            benign = [r for r in arows if r["target"] != r["adversary"]]
            asr_ben = [float(r["asr"]) for r in benign]
            scen = {}
            for r in benign:
                scen.setdefault((r["seed"], r["adversary"]), []).append(r)
            scen_rates = []
            for srows in scen.values():
                rates = [float(r["transfer_rate"]) for r in srows
                         if r["transfer_rate"] not in ("", None)]
                if rates:
                    scen_rates.append(float(np.mean(rates)))
            out.append({
                "group": gname,
                "attack": _attack_label(key),
                "method": key[0], "eps": key[1], "alpha": key[2],
                "iters": key[3], "init": key[4], "crn_window": key[5],
                "scenarios": len({(r["seed"], r["adversary"]) for r in arows}),
                "aasr_all": float(np.mean(asr_all)),
                "aasr_benign": float(np.mean(asr_ben)) if asr_ben else None,
                "aetr": float(np.mean(scen_rates)) if scen_rates else None,
                "acc_clean": float(np.mean([float(r["acc_clean"]) for r in arows])),
                "acc_adv": float(np.mean([float(r["acc_adv"]) for r in arows])),
            })
    return out


def _group_order(name: str):
    if name == "overall":
        return (0, 0, "")
    kind, _, value = name.partition("=")
    return (1 if kind == "seed" else 2, int(value), kind)


def _attack_order(key):
    method, eps, alpha, iters, init, window = key
    return (method, float(eps), float(alpha), int(iters), init,
            -1 if window in (None, "") else int(window))


_SUMMARY_COLUMNS = ["group", "attack", "method", "eps", "alpha", "iters",
                    "init", "crn_window", "scenarios", "aasr_all",
                    "aasr_benign", "aetr", "acc_clean", "acc_adv"]


def write_report(out_dir) -> None:
    """Aggregate results.csv (+ timings.csv) into summary tables.

    summary.csv carries only metric aggregates and is deterministic;
    attack_table.csv joins in mean wall-clock seconds and is not.
    """
    import os

    rows = _read_csv(os.path.join(out_dir, "results.csv"))
    summary = summarize_rows(rows)
    _write_csv(os.path.join(out_dir, "summary.csv"), _SUMMARY_COLUMNS,
               [[s[c] for c in _SUMMARY_COLUMNS] for s in summary])

    timing_path = os.path.join(out_dir, "timings.csv")
    times = {}
    if os.path.exists(timing_path):
        for row in _read_csv(timing_path):
            times.setdefault(_attack_key(row), []).append(float(row["seconds"]))
    table = []
    for s in summary:
        if s["group"] != "overall":
            continue
        key = (s["method"], s["eps"], s["alpha"], s["iters"], s["init"],
               s["crn_window"])
        secs = times.get(_norm_key(key))
        table.append([s["attack"], s["eps"], s["iters"], s["aasr_all"],
                      s["aasr_benign"], s["aetr"], s["acc_clean"], s["acc_adv"],
                      float(np.mean(secs)) if secs else None])
    _write_csv(os.path.join(out_dir, "attack_table.csv"),
               ["attack", "eps", "iters", "aasr_all", "aasr_benign", "aetr",
                "acc_clean", "acc_adv", "mean_seconds"], table)


def _norm_key(key):
    return tuple("" if v in (None, "") else str(v) for v in key)


def _read_csv(path) -> list[dict]:
    with open(path, "r", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def format_table(rows: list[list], header: list[str]) -> str:
    """Plain-text table for CLI report output."""
    cells = [header] + [[("" if v in (None, "") else str(v)) for v in r]
                        for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = io.StringIO()
    for i, row in enumerate(cells):
        out.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        out.write("\n")
        if i == 0:
            out.write("  ".join("-" * w for w in widths) + "\n")
    return out.getvalue()
