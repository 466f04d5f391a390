"""Dataset container, deterministic splits, and minibatch assembly.

Datasets are stored in a self-describing binary container (magic "CLSP",
versioned header, length-prefixed records, trailing CRC32) so that float
payloads round-trip exactly and no external schema is needed.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import blockworld as bw
from .seeding import derive_seed, philox_generator

MAGIC = b"CLSP"
FORMAT_VERSION = 1
FILE_SUFFIX = ".clasp"


class DataFormatError(Exception):
    """Base class for dataset container problems."""


class VersionMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass


class InsufficientRecordsError(ValueError):
    """Not enough records to satisfy the requested split constraints."""


@dataclass
class DatasetRecord:
    trajectory: bw.Trajectory
    caption: np.ndarray  # (CAPTION_LEN,) int64 token ids
    factors: bw.CaptionFactors
    record_id: int

    def __post_init__(self):
        self.caption = np.asarray(self.caption, dtype=np.int64).reshape(bw.CAPTION_LEN)

    def validate(self):
        self.trajectory.validate()
        parsed = bw.parse_caption(self.caption)
        if parsed != self.factors:
            raise ValueError(f"caption does not parse back to factors for record {self.record_id}")

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.factors == other.factors
            and np.array_equal(self.caption, other.caption)
            and self.trajectory == other.trajectory
        )


@dataclass
class Dataset:
    records: list
    vocab: tuple
    attrs: np.ndarray  # (N_BLOCKS, 2) shared (color, shape) table
    heldout_mode: str = "combination"

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        self.attrs = np.asarray(self.attrs, dtype=np.int64).reshape(bw.N_BLOCKS, 2)

    def __len__(self):
        return len(self.records)


@dataclass
class Batch:
    """Padded minibatch: B trajectories, captions, and factor metadata.

    ``mask`` marks the real (state, action) steps of each trajectory; padded
    steps are zero. State rows run one longer than the mask for the final
    state of each trajectory.
    """

    states: np.ndarray  # (B, T_max+1, STATE_DIM) float32
    actions: np.ndarray  # (B, T_max, 2) float32
    mask: np.ndarray  # (B, T_max) float32
    captions: np.ndarray  # (B, CAPTION_LEN) int64
    factors: list = field(default_factory=list)
    record_ids: np.ndarray = None

    @property
    def size(self) -> int:
        return self.states.shape[0]


def _record_payload(rec: DatasetRecord) -> bytes:
    states = rec.trajectory.state_matrix().astype("<f4")
    actions = rec.trajectory.action_matrix().astype("<f4")
    horizon = rec.trajectory.horizon
    head = struct.pack(
        "<IHBBBB",
        rec.record_id,
        horizon,
        rec.factors.verb_id,
        rec.factors.color_id,
        rec.factors.shape_id,
        rec.factors.direction_id,
    )
    caption = rec.caption.astype("<u2").tobytes()
    return head + caption + states.tobytes() + actions.tobytes()


def _decode_record(payload: bytes, attrs: np.ndarray) -> DatasetRecord:
    head_size = struct.calcsize("<IHBBBB")
    if len(payload) < head_size:
        raise TruncatedFileError("record header truncated")
    record_id, horizon, verb, color, shape, direction = struct.unpack(
        "<IHBBBB", payload[:head_size]
    )
    offset = head_size
    cap_bytes = bw.CAPTION_LEN * 2
    state_bytes = (horizon + 1) * bw.STATE_DIM * 4
    action_bytes = horizon * 2 * 4
    if len(payload) != head_size + cap_bytes + state_bytes + action_bytes:
        raise TruncatedFileError("record payload has the wrong length")
    caption = np.frombuffer(payload, dtype="<u2", count=bw.CAPTION_LEN, offset=offset)
    offset += cap_bytes
    states = np.frombuffer(
        payload, dtype="<f4", count=(horizon + 1) * bw.STATE_DIM, offset=offset
    ).reshape(horizon + 1, bw.STATE_DIM)
    offset += state_bytes
    actions = np.frombuffer(payload, dtype="<f4", count=horizon * 2, offset=offset).reshape(
        horizon, 2
    )
    board_states = [
        bw.BoardState(row[:2].copy(), row[2:].reshape(bw.N_BLOCKS, 2).copy(), attrs)
        for row in states
    ]
    traj = bw.Trajectory(board_states, [bw.Action(a.copy()) for a in actions])
    factors = bw.CaptionFactors(verb, color, shape, direction)
    return DatasetRecord(traj, caption.astype(np.int64), factors, record_id)


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "vocab": list(dataset.vocab),
        "attrs": dataset.attrs.tolist(),
        "heldout_mode": dataset.heldout_mode,
        "n_records": len(dataset.records),
        "caption_len": bw.CAPTION_LEN,
        "state_dim": bw.STATE_DIM,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for rec in dataset.records:
        payload = _record_payload(rec)
        body += struct.pack("<I", len(payload))
        body += payload
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def _parse_body(body: bytes, path) -> Dataset:
    offset = 4
    if len(body) < offset + 4:
        raise TruncatedFileError(f"{path}: missing header length")
    (header_len,) = struct.unpack("<I", body[offset : offset + 4])
    offset += 4
    if len(body) < offset + header_len:
        raise TruncatedFileError(f"{path}: header truncated")
    header = json.loads(body[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    attrs = np.asarray(header["attrs"], dtype=np.int64)
    records = []
    for _ in range(header["n_records"]):
        if len(body) < offset + 4:
            raise TruncatedFileError(f"{path}: record length truncated")
        (rec_len,) = struct.unpack("<I", body[offset : offset + 4])
        offset += 4
        if len(body) < offset + rec_len:
            raise TruncatedFileError(f"{path}: record truncated")
        records.append(_decode_record(body[offset : offset + rec_len], attrs))
        offset += rec_len
    if offset != len(body):
        raise DataFormatError(f"{path}: trailing bytes after records")
    return Dataset(records, tuple(header["vocab"]), attrs, header["heldout_mode"])


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedFileError(f"{path}: file too short")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes")
    body, crc_bytes = blob[4:-4], blob[-4:]
    (version,) = struct.unpack("<I", body[:4])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    crc_ok = zlib.crc32(body) == struct.unpack("<I", crc_bytes)[0]
    try:
        dataset = _parse_body(body, path)
    except TruncatedFileError:
        # A cut-off file always fails the checksum too; report the cut.
        raise
    except (DataFormatError, ValueError, KeyError, UnicodeDecodeError) as exc:
        if not crc_ok:
            raise ChecksumError(f"{path}: checksum mismatch") from exc
        raise
    if not crc_ok:
        raise ChecksumError(f"{path}: checksum mismatch")
    return dataset


def generate_dataset(
    num_records: int,
    seed: int,
    heldout_mode: str = "combination",
    unique_captions: bool = False,
) -> Dataset:
    """Scripted demo corpus: boards, pushes, and rendered captions.

    Per-record randomness is keyed independently by (seed, counter) so the
    generation order is reproducible and could be farmed out to workers.
    ``unique_captions`` re-renders until every surface string in the dataset
    is distinct (used by small overfit fixtures where exact retrieval is
    measured).
    """
    attrs = bw.sample_attr_table(philox_generator("attrs", seed))
    records = []
    seen = set()
    counter = 0
    while len(records) < num_records:
        counter += 1
        if counter > num_records * 50:
            raise RuntimeError("dataset generation is rejecting too many boards")
        rng = philox_generator("board", seed, counter)
        board = bw.sample_board(attrs, rng)
        target = int(rng.integers(bw.N_BLOCKS))
        direction = int(rng.integers(len(bw.DIRECTIONS)))
        try:
            traj, factors = bw.scripted_demo(
                board, target, direction, derive_seed("demo", seed, counter)
            )
        except bw.DemoRejected:
            continue
        caption = None
        for k in range(64):
            cand = bw.render_caption(factors, derive_seed("cap", seed, counter, k))
            if not unique_captions or tuple(cand.tolist()) not in seen:
                caption = cand
                break
        if caption is None:
            continue
        seen.add(tuple(caption.tolist()))
        records.append(DatasetRecord(traj, caption, factors, len(records)))
    return Dataset(records, bw.VOCAB, attrs, heldout_mode)


def split(records, ratios, seed, mode: str = "combination"):
    """Deterministic (train, val, test) partition.

    ``combination`` mode holds out entire (color, shape, direction) triples:
    every test record's triple is absent from train and val, and the test
    split holds at least 15 records. ``random`` mode is a plain shuffled
    partition by the given ratios.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    rng = philox_generator("split", seed)

    if mode == "random":
        perm = rng.permutation(n)
        n_test = int(round(ratios[2] * n))
        n_val = int(round(ratios[1] * n))
        test_idx = set(perm[:n_test].tolist())
        val_idx = set(perm[n_test : n_test + n_val].tolist())
    elif mode == "combination":
        by_triple = {}
        for i, rec in enumerate(records):
            by_triple.setdefault(rec.factors.triple(), []).append(i)
        triples = sorted(by_triple)
        order = rng.permutation(len(triples))
        target = max(15, int(round(ratios[2] * n)))
        test_idx = set()
        for j in order:
            if len(test_idx) >= target:
                break
            test_idx.update(by_triple[triples[j]])
        if len(test_idx) < 15:
            raise InsufficientRecordsError(
                f"only {len(test_idx)} records available for the held-out split"
            )
        if len(test_idx) >= n:
            raise InsufficientRecordsError("held-out split would consume every record")
        rest = [i for i in range(n) if i not in test_idx]
        perm = rng.permutation(len(rest))
        n_val = int(round(len(rest) * ratios[1] / (ratios[0] + ratios[1])))
        val_idx = {rest[perm[i]] for i in range(n_val)}
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    train, val, test = [], [], []
    for i, rec in enumerate(records):
        if i in test_idx:
            test.append(rec)
        elif i in val_idx:
            val.append(rec)
        else:
            train.append(rec)
    return train, val, test


def make_batches(records, batch_size: int, seed: int, drop_last: bool = False):
    """Shuffled padded batches; trailing batches smaller than 2 are dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    perm = philox_generator("batches", seed).permutation(len(records))
    batches = []
    for lo in range(0, len(records), batch_size):
        chunk = [records[i] for i in perm[lo : lo + batch_size]]
        if len(chunk) < batch_size and drop_last:
            continue
        if len(chunk) < 2:
            continue
        batches.append(collate(chunk))
    return batches


def collate(records) -> Batch:
    t_max = max(rec.trajectory.horizon for rec in records)
    b = len(records)
    states = np.zeros((b, t_max + 1, bw.STATE_DIM), dtype=np.float32)
    actions = np.zeros((b, t_max, 2), dtype=np.float32)
    mask = np.zeros((b, t_max), dtype=np.float32)
    captions = np.zeros((b, bw.CAPTION_LEN), dtype=np.int64)
    for i, rec in enumerate(records):
        horizon = rec.trajectory.horizon
        states[i, : horizon + 1] = rec.trajectory.state_matrix()
        actions[i, :horizon] = rec.trajectory.action_matrix()
        mask[i, :horizon] = 1.0
        captions[i] = rec.caption
    return Batch(
        states,
        actions,
        mask,
        captions,
        [rec.factors for rec in records],
        np.asarray([rec.record_id for rec in records], dtype=np.int64),
    )
