"""Command-line front end.

Subcommands: gen-data (write the synthetic task as FDS1 files), train (one
federation, saving checkpoints and CRN snapshots), attack (craft against a
saved checkpoint), experiment (full plan), report (re-aggregate CSVs).
A plan comes from --preset or --config (defaults when neither); --seed
overrides the plan's base seed.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .attacks import AttackConfig, craft, save_adversarial_pair
from .crn import load_crn, save_crn
from .datasets import save_fds1
from .experiment import (
    ConfigError,
    ExperimentPlan,
    PRESETS,
    _build_task,
    _read_csv,
    format_table,
    parse_config,
    preset_plan,
    run_experiment,
    write_report,
)
from .federation import run_federation, write_round_log
from .metrics import evaluate_batch
from .model import load_checkpoint, save_checkpoint


def _add_common(p):
    p.add_argument("--config", help="plan config file (INI)")
    p.add_argument("--preset", choices=PRESETS, help="named canned plan")
    p.add_argument("--seed", type=int, help="override the plan's base seed")
    p.add_argument("--out", required=True, help="output directory")


def _load_plan(args) -> ExperimentPlan:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.preset:
        plan = preset_plan(args.preset)
    elif args.config:
        plan = parse_config(args.config)
    else:
        plan = ExperimentPlan()
    if args.seed is not None:
        plan.base_seed = args.seed
    return plan


def _cmd_gen_data(args) -> int:
    plan = _load_plan(args)
    os.makedirs(args.out, exist_ok=True)
    train, part, eval_set, tests = _build_task(plan, plan.base_seed)
    save_fds1(os.path.join(args.out, "train.fds1"), train)
    save_fds1(os.path.join(args.out, "eval.fds1"), eval_set)
    for i, t in enumerate(tests):
        save_fds1(os.path.join(args.out, f"test_client{i}.fds1"), t)
    with open(os.path.join(args.out, "partition.json"), "w") as fh:
        json.dump({"weights": [float(w) for w in part.weights],
                   "client_indices": [[int(j) for j in idx]
                                      for idx in part.client_indices]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {2 + len(tests)} FDS1 files to {args.out}")
    return 0


def _cmd_train(args) -> int:
    plan = _load_plan(args)
    os.makedirs(args.out, exist_ok=True)
    adv = args.adversary
    if adv is None:
        adv = plan.fed.adversary_id if plan.fed.adversary_id is not None else 0
    cfg = replace(plan.fed, seed=plan.base_seed, adversary_id=adv)
    arch = plan.architecture()
    train, part, eval_set, tests = _build_task(plan, plan.base_seed)
    ckpt_dir = None
    if args.save_rounds:
        ckpt_dir = os.path.join(args.out, "rounds")
        os.makedirs(ckpt_dir, exist_ok=True)
    state = run_federation(cfg, arch, train, part, eval_set=eval_set,
                           attack_test=tests[adv], crn_configs=plan.crn,
                           round_checkpoint_dir=ckpt_dir)
    write_round_log(state, os.path.join(args.out, "round_log.csv"))
    save_checkpoint(os.path.join(args.out, "global_final.fadv"),
                    state.global_params)
    for i, params in enumerate(state.client_params):
        save_checkpoint(os.path.join(args.out, f"client{i}_final.fadv"), params)
    if state.crn:
        for window, crn_state in sorted(state.crn.items()):
            save_crn(os.path.join(args.out, f"crn_w{window}.crn1"), crn_state)
    final = state.round_log[-1]
    print(f"trained {cfg.rounds} rounds; last-round client{final.client} "
          f"eval acc {final.test_acc:.3f}; outputs in {args.out}")
    return 0


def _cmd_attack(args) -> int:
    plan = _load_plan(args)
    os.makedirs(args.out, exist_ok=True)
    params = load_checkpoint(args.model)
    arch = plan.architecture()
    crn_state = load_crn(args.crn) if args.crn else None
    spec = plan.attacks[0]
    cfg = AttackConfig(
        method=args.method or spec.method,
        eps=args.eps if args.eps is not None else spec.eps,
        alpha=args.alpha if args.alpha is not None else spec.alpha,
        iters=args.iters if args.iters is not None else spec.iters,
        init=args.init or spec.init,
        seed=plan.base_seed)
    adv = args.adversary if args.adversary is not None else 0
    _, _, _, tests = _build_task(plan, plan.base_seed)
    test = tests[adv]
    batch = craft(arch, params, test.images, test.labels, cfg, crn_state)
    save_adversarial_pair(os.path.join(args.out, "attack"), batch,
                          test.class_count)
    rec = evaluate_batch(arch, params, batch, adv)
    flips = int((rec.pre_labels != rec.post_labels).sum())
    acc = float((rec.post_labels == rec.true_labels).mean())
    with open(os.path.join(args.out, "attack_eval.csv"), "w") as fh:
        fh.write("method,eps,alpha,iters,init,n,asr,acc_adv,seconds\n")
        fh.write(f"{cfg.method},{cfg.eps!r},{cfg.alpha!r},{cfg.iters},"
                 f"{cfg.init},{len(rec.true_labels)},"
                 f"{flips / len(rec.true_labels)!r},{acc!r},{batch.seconds!r}\n")
    print(f"{cfg.method} eps={cfg.eps} flipped {flips}/{len(rec.true_labels)} "
          f"predictions in {batch.seconds:.3f}s")
    return 0


def _cmd_experiment(args) -> int:
    plan = _load_plan(args)
    manifest = run_experiment(plan, args.out)
    n_fail = len(manifest["failures"])
    print(f"{manifest['scenarios_completed']}/{manifest['scenarios_planned']} "
          f"scenarios completed; outputs in {args.out}")
    if n_fail:
        print(f"{n_fail} scenario(s) failed; see failures.json", file=sys.stderr)
        return 1
    return 0


def _cmd_report(args) -> int:
    write_report(args.out)
    rows = _read_csv(os.path.join(args.out, "attack_table.csv"))
    header = ["attack", "eps", "iters", "aasr_all", "aasr_benign", "aetr",
              "acc_clean", "acc_adv", "mean_seconds"]
    body = [[_round(r[h]) for h in header] for r in rows]
    print(format_table(body, header), end="")
    return 0


def _round(v: str) -> str:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return v
    return v if f == int(f) and "." not in v else f"{f:.4f}"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fedadv",
        description="Federated-learning simulator and adversarial-attack "
                    "toolkit with cross-round noise initialization.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic task as FDS1 files")
    _add_common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one federation and save checkpoints")
    _add_common(p)
    p.add_argument("--adversary", type=int, help="adversary client id (default 0)")
    p.add_argument("--save-rounds", action="store_true",
                   help="also checkpoint the global model every round")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("attack", help="craft attacks against a saved checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True, help="FADV checkpoint to attack")
    p.add_argument("--crn", help="CRN1 snapshot for init=crn")
    p.add_argument("--adversary", type=int,
                   help="whose test set to attack (default 0)")
    p.add_argument("--method", choices=("fgsm", "bim", "pgd"))
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--init", choices=("zero", "random_uniform", "crn"))
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("experiment", help="run a full experiment plan")
    _add_common(p)
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("report", help="re-aggregate CSVs into summary tables")
    p.add_argument("--out", required=True, help="experiment output directory")
    p.set_defaults(fn=_cmd_report)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
