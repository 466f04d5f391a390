"""Command-line front end.

Exit codes: 0 success, 1 usage error (bad subcommand, flag, or argument
value), 2 runtime error (missing or corrupt files, diverged training).
"""

import argparse
import dataclasses
import sys

import numpy as np
import torch

from . import blockworld as bw
from . import datastore, evalsuite, trainer
from .seeding import philox_generator


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clasp", description="Language-aligned block pushing at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a scripted-demo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout-mode", choices=("combination", "random"), default="combination")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="joint training of encoders, captioner, and policy")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-prior", help="fit the state-conditioned flow on a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("eval", help="run evaluations on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", choices=("retrieval", "caption", "exploration", "all"), default="all")
    p.add_argument("--pool-size", type=int, default=15)
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="describe one recorded trajectory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--traj-id", type=int, required=True)
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("generate", help="roll out the policy from a text command")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset supplying the board attribute table")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", help="train and compare config variants")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workdir", default=".")
    p.set_defaults(func=cmd_ablate)
    return parser


def cmd_gen_data(args) -> int:
    dataset = datastore.generate_dataset(args.num, args.seed, args.heldout_mode)
    datastore.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.records)} records to {args.out}")
    return 0


def _metrics_path(out: str) -> str:
    stem = out[: -len(".ckpt")] if out.endswith(".ckpt") else out
    return stem + "_metrics.csv"


def cmd_train(args) -> int:
    cfg = trainer.parse_config_file(args.config) if args.config else trainer.TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.data_path = args.data
    cfg.validate()
    dataset = datastore.load_dataset(args.data)
    train, _, _ = datastore.split(
        dataset.records, (0.8, 0.1, 0.1), cfg.seed, dataset.heldout_mode
    )
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    ckpt = trainer.fit(cfg, train, args.out, _metrics_path(args.out), resume_from=resume)
    print(f"trained {ckpt.step} steps on {len(train)} records; checkpoint at {args.out}")
    return 0


def cmd_train_prior(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    dataset = datastore.load_dataset(args.data)
    train, _, _ = datastore.split(
        dataset.records, (0.8, 0.1, 0.1), ckpt.config.seed, dataset.heldout_mode
    )
    out_ckpt = trainer.fit_prior(ckpt, train, args.out, _metrics_path(args.out))
    print(f"prior trained {out_ckpt.prior_step} steps; checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    dataset = datastore.load_dataset(args.data)
    model = ckpt.build_model()
    _, _, test = datastore.split(
        dataset.records, (0.8, 0.1, 0.1), ckpt.config.seed, dataset.heldout_mode
    )
    rows = []
    if args.suite in ("retrieval", "all"):
        scores = evalsuite.pooled_retrieval_eval(
            model, test, pool_size=args.pool_size, seed=args.seed
        )
        rows += [("model", k, v, args.seed) for k, v in sorted(scores.items())]
    if args.suite in ("caption", "all"):
        rows.append(("model", "caption_slot_acc", evalsuite.caption_eval(model, test), args.seed))
    if args.suite in ("exploration", "all"):
        if args.suite == "exploration" and not ckpt.has_flow:
            raise ValueError("checkpoint has no trained prior; run train-prior first")
        if ckpt.has_flow:
            for method in evalsuite.METHODS:
                rate = evalsuite.exploration_eval(
                    model, dataset.attrs, args.trials, method, args.seed
                )
                rows.append(("model", f"explore_{method}", rate, args.seed))
    print(evalsuite.format_results_table(rows))
    if args.out:
        evalsuite.write_results_csv(args.out, rows)
        print(f"wrote {args.out}")
    return 0


def cmd_caption(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    dataset = datastore.load_dataset(args.data)
    matches = [r for r in dataset.records if r.record_id == args.traj_id]
    if not matches:
        raise ValueError(f"no trajectory with id {args.traj_id} in {args.data}")
    rec = matches[0]
    model = ckpt.build_model()
    batch = datastore.collate([rec, rec])
    with torch.no_grad():
        zb, _, _, _ = model.embed_batch(batch)
    tokens = model.captioner.decode(zb[0], args.beam)
    padded = np.zeros(bw.CAPTION_LEN, dtype=np.int64)
    padded[: len(tokens)] = tokens
    print(bw.caption_to_string(padded))
    parsed = bw.parse_caption(padded)
    if parsed is None:
        print("factors: unparseable")
    else:
        print(
            "factors: "
            f"verb={bw.VERB_CLASSES[parsed.verb_id]} "
            f"color={bw.COLORS[parsed.color_id]} "
            f"shape={bw.SHAPES[parsed.shape_id]} "
            f"direction={bw.DIRECTIONS[parsed.direction_id]}"
        )
    return 0


def cmd_generate(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    tokens = bw.tokenize(args.text.split())
    factors = bw.parse_caption(tokens)
    if factors is None:
        raise ValueError(f"cannot parse command {args.text!r}")
    if args.data:
        attrs = datastore.load_dataset(args.data).attrs
    else:
        attrs = bw.sample_attr_table(philox_generator("gen_attrs", args.seed))
    if not any(tuple(row) == (factors.color_id, factors.shape_id) for row in attrs):
        attrs = attrs.copy()
        attrs[0] = (factors.color_id, factors.shape_id)
    model = ckpt.build_model()
    with torch.no_grad():
        g = model.text(torch.from_numpy(tokens[None]))
    from .encoders import sample_embedding

    z = sample_embedding(g, None, model.cfg.distributional)[0]
    records = []
    useful = 0
    from .generator import rollout

    for trial in range(args.trials):
        board = bw.sample_board(attrs, philox_generator("gen_board", args.seed, trial))
        traj = rollout(model.policy, z, board, bw.T_MAX)
        useful += bool(bw.is_useful(traj))
        records.append(datastore.DatasetRecord(traj, tokens, factors, trial))
    out = datastore.Dataset(records, bw.VOCAB, attrs, "random")
    datastore.save_dataset(out, args.out)
    print(f"rolled out {args.trials} trials; useful rate {useful / args.trials:.3f}; wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    dataset = datastore.load_dataset(args.data)
    variants = []
    for path in args.configs:
        cfg = trainer.parse_config_file(path)
        name = path.rsplit("/", 1)[-1]
        for suffix in (".cfg", ".conf", ".txt"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
        variants.append((name, cfg))
    rows = evalsuite.ablation_run(variants[0][1], dataset, args.workdir, variants)
    print(evalsuite.format_results_table(rows))
    evalsuite.write_results_csv(args.out, rows)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        OSError,
        ValueError,
        KeyError,
        datastore.DataFormatError,
        trainer.TrainingDivergedError,
        FloatingPointError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
