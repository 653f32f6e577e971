"""Single command-line entrypoint: prep, train, search, eval, sweep, control,
export, serve.

Every run prints a reproducibility header (the fully resolved invocation) to
stderr; data goes to stdout. Exit codes: 0 success, 1 usage, 2 data error,
3 numeric error. MACRID_THREADS caps BLAS parallelism.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("MACRID_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macrid",
                                     description="disentangled collaborative filtering engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="binarize, filter and split a ratings log")
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--min-items", type=int, default=5)
    p.add_argument("--heldout", type=int, required=True)
    p.add_argument("--foldin", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train", help="train a model; epoch reports as JSON lines")
    _train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.mcrd)")
    _common(p)

    p = sub.add_parser("search", help="random hyper-parameter search")
    p.add_argument("--trials", type=int, required=True)
    _train_flags(p, search=True)
    p.add_argument("--out", default=None, help="retrain and save the winner here")
    _common(p)

    p = sub.add_parser("eval", help="ranking metrics on a held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("validation", "test"), default="test")
    _common(p)

    p = sub.add_parser("sweep", help="grid over beta/sigma0; CSV of NDCG vs independence")
    p.add_argument("--grid", nargs="+", required=True,
                   help="KEY=V1,V2,... pairs, e.g. beta=0,1,10 sigma0=0.1,0.2")
    p.add_argument("--out", required=True)
    _train_flags(p, search=True)
    _common(p)

    p = sub.add_parser("control", help="monotone item trajectory along one dimension")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None, help="needed for --user anchors")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--item", default=None)
    group.add_argument("--user", default=None)
    p.add_argument("--k", type=int, default=None, help="concept for --user anchors")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--b", type=int, default=8)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--tau", type=float, default=None, help="objective temperature override")
    _common(p)

    p = sub.add_parser("export", help="write item/user embeddings as TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("serve", help="read-only JSON service for the explorer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--port", type=int, default=7700)
    p.add_argument("--host", default="127.0.0.1")
    _common(p)

    return parser


def _train_flags(p, search=False):
    p.add_argument("--corpus", required=True)
    if not search:
        p.add_argument("--k", type=int, default=7)
        p.add_argument("--beta", type=float, default=1.0)
        p.add_argument("--sigma0", type=float, default=0.1)
        p.add_argument("--lambda", dest="gumbel_temp", type=float, default=1.0)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--l2", type=float, default=0.0)
        p.add_argument("--dropout", type=float, default=0.5,
                       help="keep probability, in (0, 1]")
        p.add_argument("--layers", type=int, default=0)
        p.add_argument("--width", type=int, default=100)
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--neg-samples", default="auto",
                   help="'full', 'auto', or a negative-sample count")
    p.add_argument("--similarity", choices=("cosine", "inner"), default="cosine")
    p.add_argument("--adaptive-k", default="off", help="'off' or a JS threshold")


def _common(p):
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--json", nargs="?", const="-", default=None,
                   help="JSON output; optionally a file path")


def _header(args):
    parts = ["macrid", args.command]
    skip = {"command", "quiet"}
    for key, val in sorted(vars(args).items()):
        if key in skip or val is None:
            continue
        flag = "--" + key.replace("_", "-")
        if key == "gumbel_temp":
            flag = "--lambda"
        if isinstance(val, bool):
            if val:
                parts.append(flag)
        else:
            parts.append(f"{flag} {val}")
    if not args.quiet:
        print("# " + " ".join(parts), file=sys.stderr)


def _emit(args, payload, human_lines):
    if args.json == "-":
        print(json.dumps(payload))
    elif args.json:
        Path(args.json).write_text(json.dumps(payload, indent=2))
        if not args.quiet:
            print(f"wrote {args.json}")
    else:
        for line in human_lines:
            print(line)


def _neg_samples(value):
    if value in ("auto", None):
        return None
    if value == "full":
        return "full"
    return int(value)


def _hyperparams(args):
    from .model import HyperParams

    return HyperParams(k=args.k, d=args.d, beta=args.beta, sigma0=args.sigma0,
                       gumbel_temp=args.gumbel_temp, lr=args.lr, l2_reg=args.l2,
                       dropout_keep=args.dropout, hidden_layers=args.layers,
                       hidden_width=args.width,
                       neg_samples=_neg_samples(args.neg_samples))


def _train_config(args, hp):
    from .trainer import TrainConfig

    adaptive = None if args.adaptive_k == "off" else float(args.adaptive_k)
    return TrainConfig(hp=hp, epochs=args.epochs, batch_size=args.batch,
                       seed=args.seed, patience=args.patience,
                       similarity=args.similarity, adaptive_k_threshold=adaptive)


def cmd_prep(args) -> int:
    from .corpus import load_ratings, make_split, save_corpus, save_split

    m = load_ratings(args.input, args.threshold, args.min_items)
    split = make_split(m, args.heldout, args.foldin, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(m, out / "corpus.mcor")
    save_split(split, out / "split.json")
    payload = {"n_users": m.n_users, "n_items": m.n_items,
               "n_interactions": m.n_interactions,
               "train_users": len(split.train_users),
               "validation_users": len(split.validation_users),
               "test_users": len(split.test_users), "out": str(out)}
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def _budget_warning(params):
    from .trainer import parameter_budget

    count, budget = parameter_budget(params)
    if count > budget:
        print(f"warning: {count} trainable parameters exceed the 2*M*d "
              f"reference budget of {budget}", file=sys.stderr)


def cmd_train(args) -> int:
    from .corpus import load_corpus_dir
    from .model import save_checkpoint
    from .trainer import train

    corpus, split = load_corpus_dir(args.corpus)
    cfg = _train_config(args, _hyperparams(args))

    def progress(epoch, loss_value, ndcg):
        if not args.quiet:
            print(json.dumps({"epoch": epoch, "loss": round(loss_value, 6),
                              "val_ndcg100": round(ndcg, 6)}))

    params, report = train(corpus, split, cfg, progress=progress)
    _budget_warning(params)
    save_checkpoint(params, corpus.item_vocab, args.out)
    summary = {"best_epoch": report.best_epoch, "best_val_ndcg100": report.best_val(),
               "epochs_run": len(report.epoch_losses), "seconds": round(report.seconds, 2),
               "param_count": report.param_count, "final_k": report.final_k,
               "checkpoint": args.out}
    print(json.dumps(summary))
    return 0


def cmd_search(args) -> int:
    from .corpus import load_corpus_dir
    from .model import HyperParams, save_checkpoint
    from .trainer import TrainConfig, random_search, train

    corpus, split = load_corpus_dir(args.corpus)
    base = TrainConfig(hp=HyperParams(d=args.d, neg_samples=_neg_samples(args.neg_samples)),
                       epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                       patience=args.patience, similarity=args.similarity)

    def progress(t, hp, score):
        if not args.quiet:
            print(json.dumps({"trial": t, "val_ndcg100": round(score, 6),
                              "hp": {k: v for k, v in vars(hp).items()}}))

    best_cfg, best_report, trials = random_search(
        corpus, split, args.trials, args.seed, base=base, d=args.d, progress=progress)
    payload = {"best": {"hp": vars(best_cfg.hp).copy(), "seed": best_cfg.seed,
                        "val_ndcg100": best_report.best_val()},
               "trials": trials}
    if args.out:
        params, _ = train(corpus, split, best_cfg)
        save_checkpoint(params, corpus.item_vocab, args.out)
        payload["checkpoint"] = args.out
    _emit(args, payload, [json.dumps(payload["best"])])
    return 0


def cmd_eval(args) -> int:
    from .corpus import load_corpus_dir
    from .metrics import evaluate
    from .model import load_checkpoint

    params, _ = load_checkpoint(args.ckpt)
    corpus, split = load_corpus_dir(args.corpus)
    result = evaluate(params, corpus, split, args.split)
    payload = result.summary()
    payload["split"] = args.split
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def cmd_sweep(args) -> int:
    import numpy as np

    from .corpus import load_corpus_dir
    from .metrics import evaluate, independence
    from .model import (HyperParams, encode, prototype_logits, sample_assignment)
    from .trainer import TrainConfig, train

    corpus, split = load_corpus_dir(args.corpus)
    grid = {}
    for spec_pair in args.grid:
        key, _, vals = spec_pair.partition("=")
        if not vals:
            raise SystemExit(f"bad --grid entry {spec_pair!r}")
        grid[key] = [float(v) for v in vals.split(",")]
    keys = sorted(grid)
    rows = ["config," + ",".join(keys) + ",ndcg100,independence"]
    results = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        hp = HyperParams(d=args.d, neg_samples=_neg_samples(args.neg_samples))
        for key, val in overrides.items():
            if key == "k":
                val = int(val)
            setattr(hp, key, val)
        cfg = TrainConfig(hp=hp, epochs=args.epochs, batch_size=args.batch,
                          seed=args.seed, patience=args.patience,
                          similarity=args.similarity)
        params, report = train(corpus, split, cfg)
        ndcg = evaluate(params, corpus, split, "validation").mean("ndcg100")
        assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
        users = [u for u in split.validation_users if len(split.foldin.get(int(u), [])) > 0]
        posts = encode([split.foldin[int(u)] for u in users], assignment, params, hp)
        indep = independence(np.stack([p.mu.reshape(-1) for p in posts])).value
        name = "-".join(f"{k}{v:g}" for k, v in overrides.items())
        rows.append(name + "," + ",".join(f"{v:g}" for v in combo)
                    + f",{ndcg:.6f},{indep:.6f}")
        results.append({"config": overrides, "ndcg100": ndcg, "independence": indep})
        if not args.quiet:
            print(json.dumps(results[-1]))
    Path(args.out).write_text("\n".join(rows) + "\n")
    if args.json:
        _emit(args, results, [])
    return 0


def cmd_control(args) -> int:
    from . import control as ctl
    from .corpus import load_corpus_dir
    from .model import (HyperParams, encode, load_checkpoint, prototype_logits,
                        sample_assignment)

    params, item_vocab = load_checkpoint(args.ckpt)
    if args.item is not None:
        index = {ext: i for i, ext in enumerate(item_vocab)}
        if args.item not in index:
            from .errors import DataError

            raise DataError(f"unknown item {args.item!r}")
        anchor = ctl.anchor_from_item(params, index[args.item])
    else:
        if args.corpus is None or args.k is None:
            raise SystemExit("--user anchors need --corpus and --k")
        corpus, split = load_corpus_dir(args.corpus)
        user_index = {ext: u for u, ext in enumerate(corpus.user_vocab)}
        if args.user not in user_index:
            from .errors import DataError

            raise DataError(f"unknown user {args.user!r}")
        u = user_index[args.user]
        row = split.foldin.get(u, corpus.rows[u])
        assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
        hp = HyperParams(k=params.n_concepts, d=params.dim, tau=params.tau,
                         sigma0=params.sigma0)
        post = encode([row], assignment, params, hp)[0]
        anchor = ctl.anchor_from_user(post, args.k)

    query = ctl.ControlQuery(anchor=anchor, dim=args.dim, b=args.b,
                             gamma=args.gamma, beam_width=args.beam, tau=args.tau)
    traj = ctl.select_trajectory(query, params)
    payload = {"items": [item_vocab[i] for i in traj.items],
               "dim_values": [float(v) for v in traj.dim_values],
               "boundaries": [float(v) for v in traj.boundaries],
               "objective": traj.objective, "k_star": traj.k_star,
               "range": [traj.probed_range[0], traj.probed_range[1]]}
    _emit(args, payload, [json.dumps(payload, indent=2)])
    return 0


def cmd_export(args) -> int:
    from .corpus import load_corpus_dir
    from .metrics import UserExport, component_confidence, export_embeddings
    from .model import (HyperParams, encode, load_checkpoint, prototype_logits,
                        sample_assignment)

    params, item_vocab = load_checkpoint(args.ckpt)
    corpus, split = load_corpus_dir(args.corpus)
    assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
    hp = HyperParams(k=params.n_concepts, d=params.dim, tau=params.tau,
                     sigma0=params.sigma0)
    users = []
    visible = []
    for u in range(corpus.n_users):
        row = split.foldin.get(u, corpus.rows[u])
        if len(row) > 0:
            visible.append((u, row))
    for start in range(0, len(visible), 512):
        chunk = visible[start: start + 512]
        posts = encode([row for _, row in chunk], assignment, params, hp)
        for (u, row), post in zip(chunk, posts):
            users.append(UserExport(user_id=corpus.user_vocab[u], posterior=post,
                                    confidence=component_confidence(assignment, row)))
    export_embeddings(params, assignment, users, item_vocab, args.out)
    if not args.quiet:
        print(f"wrote {args.out} ({params.n_items} items, {len(users)} users)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_state, create_app

    state = build_state(args.ckpt, args.corpus)
    app = create_app(state)
    if not args.quiet:
        print(f"serving on http://{args.host}:{args.port}", file=sys.stderr)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


COMMANDS = {
    "prep": cmd_prep,
    "train": cmd_train,
    "search": cmd_search,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "control": cmd_control,
    "export": cmd_export,
    "serve": cmd_serve,
}


def dispatch(argv) -> int:
    from .errors import DataError, MacridError, NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    _header(args)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except MacridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return exc.code if isinstance(exc.code, int) else 1
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    _apply_thread_cap()
    return dispatch(argv if argv is not None else sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
