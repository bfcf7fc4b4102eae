"""Command-line driver.

Subcommands: train-ocr, eval-ocr, gen-instance, train-flight, build-pairings,
solve-cpp, report. Each reads a JSON config, writes its artifacts into an
output directory, and prints a one-line summary. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .ckn import LayerSpec
from .crew import (CostConfig, GenParams, Instance, Pairing, PairingPlan, RuleSet,
                   break_illegal, greedy_build_pairings, instance_to_example,
                   model_predictions, oracle_predictions)
from .errors import StructCknError
from .inference import max_product_chain
from .ocr import load_ocr, word_to_linear_example, word_to_structured_example
from .optim import (bcfw_train, sdca_train, write_training_log)
from .setpart import (BnbConfig, EnumLimits, MasterProblem, WindowConfig,
                      add_base_constraints, branch_and_bound, enumerate_pairings,
                      solve_windows, warm_start, write_solution,
                      write_window_metrics)
from .trainer import StructCknModel, TrainConfig, batch_train_struct_ckn, train_struct_ckn


def _read_config(path):
    with open(path) as fh:
        return json.load(fh)


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _worker_count():
    return int(os.environ.get("STRUCTCKN_THREADS", "1"))


def _dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# OCR commands
# ---------------------------------------------------------------------------

def _ocr_error(weights, examples):
    wrong = total = 0
    for model, y in examples:
        nt, et = model.potentials(weights)
        pred, _ = max_product_chain(nt, et)
        wrong += int(np.sum(pred != y))
        total += len(y)
    return wrong / total


def cmd_train_ocr(args):
    cfg = _read_config(args.config)
    out = _out_dir(args)
    dataset = load_ocr(cfg["data"])
    test_fold = cfg.get("test_fold", 0)
    train_words, test_words = dataset.split(test_fold)
    limit = cfg.get("max_train_words")
    if limit:
        train_words = train_words[:limit]
    features = cfg.get("features", "linear")
    seed = cfg.get("seed", 0)
    log_rows = []

    if features == "linear":
        train = [word_to_linear_example(w) for w in train_words]
        test = [word_to_linear_example(w) for w in test_words]
        eval_fn = (lambda w: _ocr_error(w, test)) if test else None
        optimizer = cfg.get("optimizer", "sdca")
        common = dict(lam=cfg.get("lam"), epochs=cfg.get("epochs", 30),
                      seed=seed, log_rows=log_rows, eval_fn=eval_fn)
        if optimizer == "sdca":
            state = sdca_train(train, uniform_frac=cfg.get("uniform_frac", 0.8),
                               target_gap=cfg.get("target_gap"),
                               gap_check_every=cfg.get("gap_check_every", 1),
                               **common)
        else:
            state = bcfw_train(train, loss_weight=cfg.get("loss_weight", 1.0),
                               **common)
        test_error = _ocr_error(state.w, test) if test else None
        _dump_json(os.path.join(out, "model.json"),
                   {"format_version": 1, "kind": f"linear-{optimizer}",
                    "weights": state.w.tolist(), "test_fold": test_fold,
                    "config": cfg})
    else:
        train = [word_to_structured_example(w) for w in train_words]
        test = [word_to_structured_example(w) for w in test_words]
        tc = TrainConfig(
            layers=[LayerSpec.from_dict(l) for l in cfg["layers"]],
            optimizer=cfg.get("optimizer", "sdca"),
            n_ep=cfg.get("n_ep", 10), outer_iters=cfg.get("outer_iters", 30),
            lam=cfg.get("lam"), scaler=cfg.get("scaler", "average_unit_norm"),
            patches_per_image=cfg.get("patches_per_image", 40), seed=seed,
            ckn_lr=cfg.get("ckn_lr", 0.1),
            freeze_inv_sqrt=cfg.get("freeze_inv_sqrt", False))
        model = train_struct_ckn(train, tc, eval_examples=test or None,
                                 log_rows=log_rows)
        from .trainer import evaluate_error
        test_error = evaluate_error(model, test) if test else None
        model.save(os.path.join(out, "model.json"))

    write_training_log(os.path.join(out, "training_log.csv"), log_rows)
    summary = {"command": "train-ocr", "features": features,
               "n_train_words": len(train_words), "n_test_words": len(test_words),
               "test_error": test_error, "seed": seed}
    _dump_json(os.path.join(out, "summary.json"), summary)
    print(f"train-ocr: {features} features, test error "
          f"{'n/a' if test_error is None else f'{100 * test_error:.2f}%'} "
          f"-> {out}")
    return 0


def cmd_eval_ocr(args):
    cfg = _read_config(args.config)
    out = _out_dir(args)
    dataset = load_ocr(cfg["data"])
    _, test_words = dataset.split(cfg.get("test_fold", 0))
    with open(cfg["model"]) as fh:
        doc = json.load(fh)
    if doc.get("kind", "").startswith("linear"):
        weights = np.array(doc["weights"])
        test = [word_to_linear_example(w) for w in test_words]
        err = _ocr_error(weights, test)
    else:
        model = StructCknModel.load(cfg["model"])
        from .trainer import evaluate_error
        err = evaluate_error(model, [word_to_structured_example(w)
                                     for w in test_words])
    _dump_json(os.path.join(out, "eval.json"),
               {"test_error": err, "n_test_words": len(test_words)})
    print(f"eval-ocr: test error {100 * err:.2f}% over {len(test_words)} words")
    return 0


# ---------------------------------------------------------------------------
# crew pipeline commands
# ---------------------------------------------------------------------------

def cmd_gen_instance(args):
    cfg = _read_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    rules = RuleSet.from_json(cfg["rules"]) if "rules" in cfg else RuleSet()
    params = GenParams.from_dict(cfg.get("params", {"seed": cfg.get("seed", 0)}))
    if "seed" in cfg:
        params.seed = cfg["seed"]
    from .crew import generate_instance
    inst = generate_instance(params, rules)
    path = os.path.join(out, "instance.json")
    inst.save(path)
    print(f"gen-instance: {inst.n_flights} flights, "
          f"{len(inst.ground_truth)} ground-truth pairings -> {path}")
    return 0


def cmd_train_flight(args):
    cfg = _read_config(args.config)
    out = _out_dir(args)
    instances = [Instance.load(p) for p in cfg["instances"]]
    examples = [instance_to_example(inst, pairwise=cfg.get("pairwise", "none"))
                for inst in instances]
    tc = TrainConfig(
        layers=[LayerSpec.from_dict(l) for l in cfg["layers"]],
        optimizer=cfg.get("optimizer", "sdca"),
        n_ep=cfg.get("n_ep", 10), outer_iters=cfg.get("outer_iters", 10),
        lam=cfg.get("lam"), scaler=cfg.get("scaler", "average_unit_norm"),
        patches_per_image=cfg.get("patches_per_image", 40),
        seed=cfg.get("seed", 0), embedding_dim=cfg.get("embedding_dim", 16),
        batch_size=cfg.get("batch_size", 128),
        ad3_max_iters=cfg.get("ad3_max_iters", 400),
        ckn_lr=cfg.get("ckn_lr", 0.1))
    log_rows = []
    model = batch_train_struct_ckn(examples, tc, log_rows=log_rows)
    model.save(os.path.join(out, "model.json"))
    write_training_log(os.path.join(out, "training_log.csv"), log_rows)
    print(f"train-flight: {len(instances)} instance(s) -> {out}/model.json")
    return 0


def cmd_build_pairings(args):
    cfg = _read_config(args.config)
    out = _out_dir(args)
    inst = Instance.load(cfg["instance"])
    source = cfg.get("source", "model")
    if source == "oracle":
        preds = oracle_predictions(inst)
    else:
        model = StructCknModel.load(cfg["model"])
        preds = model_predictions(model, inst,
                                  constrained=cfg.get("constrained", True))
    plan = greedy_build_pairings(preds, inst)
    bid = tuple(cfg["bid_period"]) if "bid_period" in cfg else None
    feasible, stats = break_illegal(plan, inst.rules, inst, bid_period=bid)
    _dump_json(os.path.join(out, "plan.json"), {
        "pairings": [p.to_json() for p in feasible.pairings],
        "uncovered": feasible.uncovered,
        "stats": stats,
        "initial": {"n_pairings": len(plan.pairings),
                    "uncovered": plan.uncovered},
    })
    print(f"build-pairings: {stats['n_pairings']} feasible pairings, "
          f"{stats['percent_infeasible']:.2f}% infeasible -> {out}/plan.json")
    return 0


def _load_plan(path, instance):
    with open(path) as fh:
        doc = json.load(fh)
    pairings = [Pairing.from_json(p) for p in doc["pairings"]]
    cost_cfg = CostConfig()
    from .crew import pairing_cost
    for p in pairings:
        p.cost = pairing_cost(p, cost_cfg, instance)
    return PairingPlan(pairings, doc.get("uncovered", ()))


def cmd_solve_cpp(args):
    cfg = _read_config(args.config) if args.config else {}
    out = _out_dir(args)
    inst = Instance.load(cfg["instance"])
    plan = None
    mode = args.mode or cfg.get("warm_mode")
    warm_path = args.warm_start or cfg.get("warm_start")
    if warm_path:
        plan = _load_plan(warm_path, inst)
        mode = mode or "both"
    bnb_cfg = BnbConfig(gap_tol=cfg.get("gap_tol", 1e-6),
                        node_limit=cfg.get("node_limit", 5000))
    limits = EnumLimits(max_columns=cfg.get("max_columns", 50000))
    base_targets = cfg.get("base_targets")
    if base_targets is None and cfg.get("balance_bases", True):
        base_targets = {b: 1.0 / len(inst.bases) for b in inst.bases}
    window_days = cfg.get("window_days")
    if window_days:
        wc = WindowConfig(window_days, cfg.get("overlap_days", 0))
        solution, rows = solve_windows(
            inst, wc, plan=plan, warm_mode=mode, bnb_cfg=bnb_cfg,
            enum_limits=limits, base_targets=base_targets,
            base_penalty=cfg.get("base_penalty", 1.0))
    else:
        pool = enumerate_pairings(inst, limits=limits)
        master = MasterProblem(inst, pool)
        if base_targets:
            add_base_constraints(master, base_targets, cfg.get("base_penalty", 1.0))
        if plan is not None and mode:
            warm_start(master, plan, mode)
        res = branch_and_bound(master, bnb_cfg)
        solution = {
            "pairings": [master.pool.pairings[j].to_json()
                         | {"cost": master.pool.pairings[j].cost}
                         for j in res.selected],
            "deadheads": res.over, "undercovered": res.under,
            "metrics": {"solution_cost": res.cost,
                        "global_cost": res.global_cost,
                        "n_deadheads": len(res.over),
                        "n_nodes": res.stats["n_nodes"],
                        "lp_root": res.stats["lp_root"],
                        "wall_seconds": res.stats["wall_seconds"]},
        }
        rows = [{"window": 0, **{k: res.stats[k] for k in
                                 ("lp_root", "n_fractional_root", "n_nodes",
                                  "best_lp", "best_int", "wall_seconds")}}]
    write_solution(os.path.join(out, "solution.json"), solution)
    write_window_metrics(os.path.join(out, "metrics.csv"), rows)
    m = solution["metrics"]
    print(f"solve-cpp: cost {m['solution_cost']:.1f} "
          f"(global {m['global_cost']:.1f}, deadheads {m['n_deadheads']}) "
          f"-> {out}/solution.json")
    return 0


def cmd_report(args):
    cfg = _read_config(args.config)
    out = _out_dir(args)
    metrics = {}
    for name, path in cfg.get("metrics_files", {}).items():
        if path.endswith(".csv"):
            with open(path) as fh:
                lines = [l.strip().split(",") for l in fh if l.strip()]
            metrics[name] = {"columns": lines[0], "rows": lines[1:]}
        else:
            with open(path) as fh:
                metrics[name] = json.load(fh)
    report = {"version": f"structckn-{__version__}",
              "seed": cfg.get("seed"),
              "worker_count": _worker_count(),
              "config": cfg,
              "metrics": metrics,
              "generated_unix_time": int(time.time())}
    path = os.path.join(out, "report.json")
    _dump_json(path, report)
    print(f"report: {len(metrics)} metric table(s) -> {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "train-ocr": cmd_train_ocr,
    "eval-ocr": cmd_eval_ocr,
    "gen-instance": cmd_gen_instance,
    "train-flight": cmd_train_flight,
    "build-pairings": cmd_build_pairings,
    "solve-cpp": cmd_solve_cpp,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="structckn",
        description="CKN + structured CRF training and the crew-pairing pipeline")
    parser.add_argument("--version", action="version",
                        version=f"structckn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file",
                       required=name not in ("gen-instance", "solve-cpp"))
        p.add_argument("--out", default="out", help="output directory")
        if name == "gen-instance":
            p.add_argument("--seed", type=int, default=None)
        if name == "solve-cpp":
            p.add_argument("--warm-start", help="plan JSON for warm starting")
            p.add_argument("--mode", choices=["clusters", "solution", "both"])
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return COMMANDS[args.command](args)
    except (StructCknError, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
