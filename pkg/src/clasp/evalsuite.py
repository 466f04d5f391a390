"""The three evaluations: cross-modal retrieval, caption slot accuracy, and
exploration usefulness, plus the ablation comparison harness."""

import dataclasses

import numpy as np
import torch

from . import blockworld as bw
from . import datastore
from .generator import rollout
from .prior import sample_prior
from .seeding import derive_seed, philox_generator
from .substrate import NoiseSource
from .trainer import CLASPModel, Checkpoint, TrainConfig, fit, fit_prior


def retrieval_eval(model: CLASPModel, pool, k_list=(1, 5)) -> dict:
    """R@K both directions on one pool of matched (trajectory, caption) rows.

    Embeddings use eps=0. For each behavior the captions are ranked by
    similarity (text retrieval), and vice versa; exact similarity ties go to
    the lower record id, so results are order-independent.
    """
    if len(pool) < max(k_list):
        raise ValueError(f"pool of {len(pool)} smaller than max K {max(k_list)}")
    batch = datastore.collate(pool)
    with torch.no_grad():
        zb, zl, _, _ = model.embed_batch(batch)
    sims = (zb @ zl.t()).numpy()
    ids = np.asarray([rec.record_id for rec in pool])
    return rank_scores(sims, ids, k_list)


def rank_scores(sims: np.ndarray, record_ids: np.ndarray, k_list=(1, 5)) -> dict:
    """R@K from a query-by-candidate similarity matrix with id tie-breaks."""
    n = sims.shape[0]
    out = {}
    for direction in ("text", "behavior"):
        mat = sims if direction == "text" else sims.T
        ranks = np.empty(n, dtype=np.int64)
        for i in range(n):
            # order candidates by similarity desc, then record id asc
            order = np.lexsort((record_ids, -mat[i]))
            ranks[i] = int(np.nonzero(order == i)[0][0]) + 1
        for k in k_list:
            out[f"{direction}_r@{k}"] = float(np.mean(ranks <= k))
    return out


def pooled_retrieval_eval(
    model: CLASPModel, records, pool_size: int = 15, k_list=(1, 5), n_pools: int = 20, seed: int = 0
) -> dict:
    """Average retrieval over several deterministic pools drawn from records.

    Pools are drawn with per-triple caps so a single held-out combination
    cannot dominate a pool; a perfectly aligned model can then always
    separate the pool by caption content.
    """
    rng = philox_generator("pools", seed)
    by_triple = {}
    for i, rec in enumerate(records):
        by_triple.setdefault(rec.factors.triple(), []).append(i)
    triples = sorted(by_triple)
    totals = {}
    for _ in range(n_pools):
        chosen = _stratified_pool(by_triple, triples, pool_size, rng)
        scores = retrieval_eval(model, [records[i] for i in chosen], k_list)
        for key, val in scores.items():
            totals[key] = totals.get(key, 0.0) + val
    return {k: v / n_pools for k, v in totals.items()}


def _stratified_pool(by_triple, triples, pool_size, rng):
    cap = max(1, -(-pool_size // len(triples)))  # ceil division
    chosen = []
    counts = {t: 0 for t in triples}
    order = rng.permutation(sum(len(v) for v in by_triple.values()))
    flat = [i for t in triples for i in by_triple[t]]
    triple_of = {i: t for t in triples for i in by_triple[t]}
    for j in order:
        idx = flat[j]
        t = triple_of[idx]
        if counts[t] >= cap:
            continue
        chosen.append(idx)
        counts[t] += 1
        if len(chosen) == pool_size:
            break
    if len(chosen) < pool_size:
        # relax the cap when the split has too few distinct combinations
        for j in order:
            idx = flat[j]
            if idx in chosen:
                continue
            chosen.append(idx)
            if len(chosen) == pool_size:
                break
    return chosen


def caption_eval(model: CLASPModel, records, beam_width: int = 3) -> float:
    """Fraction of records whose decoded caption parses to the exact
    ground-truth factors; unparseable output counts as wrong."""
    if not records:
        raise ValueError("no records to caption")
    correct = 0
    for lo in range(0, len(records), 64):
        chunk = records[lo : lo + 64]
        batch = datastore.collate(chunk) if len(chunk) >= 2 else datastore.collate(chunk * 2)
        with torch.no_grad():
            zb, _, _, _ = model.embed_batch(batch)
        for i, rec in enumerate(chunk):
            tokens = model.captioner.decode(zb[i], beam_width)
            padded = np.zeros(bw.CAPTION_LEN, dtype=np.int64)
            padded[: len(tokens)] = tokens
            parsed = bw.parse_caption(padded)
            if parsed is not None and parsed == rec.factors:
                correct += 1
    return correct / len(records)


METHODS = ("behaviour_prior", "text_encoding", "random")


def exploration_eval(
    model: CLASPModel, attrs: np.ndarray, n_trials: int, method: str, seed: int = 0
) -> float:
    """Useful-trajectory rate over fresh boards for one exploration method."""
    if method not in METHODS:
        raise ValueError(f"unknown exploration method {method!r}; want one of {METHODS}")
    if method == "behaviour_prior" and model.flow is None:
        raise ValueError("checkpoint has no trained prior; run the prior phase first")
    useful = 0
    for trial in range(n_trials):
        rng = philox_generator("explore", seed, method, trial)
        board = bw.sample_board(attrs, rng)
        traj = _explore_rollout(model, board, method, rng)
        useful += bool(bw.is_useful(traj))
    return useful / n_trials


def _explore_rollout(model: CLASPModel, board: bw.BoardState, method: str, rng) -> bw.Trajectory:
    if method == "random":
        states = [board]
        actions = []
        state = board
        for _ in range(bw.T_MAX):
            a = bw.Action(rng.uniform(-bw.A_MAX, bw.A_MAX, 2).astype(np.float32))
            state = bw.step(state, a)
            actions.append(a)
            states.append(state)
        return bw.Trajectory(states, actions)
    if method == "behaviour_prior":
        s0 = torch.from_numpy(board.as_vector()[None])
        eps = torch.from_numpy(rng.standard_normal((1, model.cfg.embed_dim))).float()
        z = sample_prior(model.flow, s0, eps)[0]
    else:
        factors = _random_factors(board, rng)
        caption = bw.render_caption(factors, int(rng.integers(2**62)))
        tokens = torch.from_numpy(caption[None])
        with torch.no_grad():
            g = model.text(tokens)
        eps = torch.from_numpy(rng.standard_normal((1, model.cfg.embed_dim))).float()
        from .encoders import sample_embedding

        z = sample_embedding(g, eps, model.cfg.distributional)[0]
    return rollout(model.policy, z, board, bw.T_MAX)


def _random_factors(board: bw.BoardState, rng) -> bw.CaptionFactors:
    """A command for one of the objects actually on the board."""
    color, shape = board.block_attrs[int(rng.integers(bw.N_BLOCKS))]
    direction = int(rng.integers(len(bw.DIRECTIONS)))
    return bw.CaptionFactors(0, int(color), int(shape), direction)


def write_results_csv(path, rows) -> None:
    """rows: iterable of (variant, metric, value, seed)."""
    with open(path, "w") as fh:
        fh.write("variant,metric,value,seed\n")
        for variant, metric, value, seed in rows:
            fh.write(f"{variant},{metric},{repr(float(value))},{seed}\n")


def format_results_table(rows) -> str:
    width = max([7] + [len(r[0]) for r in rows])
    lines = [f"{'variant':<{width}}  {'metric':<18}  {'value':>10}  seed"]
    for variant, metric, value, seed in rows:
        lines.append(f"{variant:<{width}}  {metric:<18}  {value:>10.4f}  {seed}")
    return "\n".join(lines)


def evaluate_checkpoint(
    ckpt: Checkpoint,
    dataset: datastore.Dataset,
    seed: int = 0,
    pool_size: int = 15,
    n_pools: int = 20,
    n_trials: int = 300,
    split_ratios=(0.8, 0.1, 0.1),
    include_exploration: bool = None,
) -> list:
    """All applicable evaluations for one checkpoint; returns result rows."""
    model = ckpt.build_model()
    _, _, test = datastore.split(
        dataset.records, split_ratios, ckpt.config.seed, dataset.heldout_mode
    )
    rows = []
    retr = pooled_retrieval_eval(model, test, pool_size, (1, 5), n_pools, seed)
    rows += [("model", k, v, seed) for k, v in sorted(retr.items())]
    rows.append(("model", "caption_slot_acc", caption_eval(model, test), seed))
    if include_exploration is None:
        include_exploration = ckpt.has_flow
    if include_exploration:
        for method in METHODS:
            if method == "behaviour_prior" and not ckpt.has_flow:
                continue
            rate = exploration_eval(model, dataset.attrs, n_trials, method, seed)
            rows.append(("model", f"explore_{method}", rate, seed))
    return rows


def ablation_run(base: TrainConfig, dataset: datastore.Dataset, workdir, variants=None) -> list:
    """Train and evaluate config variants with shared seeds; one table out.

    Default variants: the distributional model, the point-estimate model,
    and the no-alignment baseline.
    """
    if variants is None:
        variants = [
            ("distributional", base),
            ("non_distributional", dataclasses.replace(base, distributional=False)),
            ("no_alignment", dataclasses.replace(base, beta_align=0.0)),
        ]
    train, _, test = datastore.split(
        dataset.records, (0.8, 0.1, 0.1), base.seed, dataset.heldout_mode
    )
    rows = []
    for name, cfg in variants:
        ckpt = fit(
            cfg,
            train,
            f"{workdir}/{name}.ckpt",
            f"{workdir}/{name}_metrics.csv",
        )
        model = ckpt.build_model()
        retr = pooled_retrieval_eval(model, test, seed=cfg.seed)
        rows += [(name, k, v, cfg.seed) for k, v in sorted(retr.items())]
        rows.append((name, "caption_slot_acc", caption_eval(model, test), cfg.seed))
    return rows
