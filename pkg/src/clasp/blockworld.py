"""Deterministic 2D block-pushing world with scripted demos and a templated language.

The board is the unit square. A disc-shaped effector pushes point blocks around;
blocks have no collision between each other and are free to leave the board
(leaving the board is what the usefulness metric penalises). Captions are
generated from a small closed grammar with several surface forms per factor,
so one trajectory maps to many strings and vice versa.
"""

from dataclasses import dataclass

import numpy as np

from .seeding import philox_generator

# board / dynamics constants
BOARD_LO = 0.0
BOARD_HI = 1.0
N_BLOCKS = 8
A_MAX = 0.05  # per-component action bound, board units
CONTACT_RADIUS = 0.04  # effector disc radius
N_SUBSTEPS = 8
T_MIN = 8
T_MAX = 24
STATE_DIM = 2 + 2 * N_BLOCKS  # effector + block positions, flattened

# "useful" threshold: the quantitative stand-in for block rearrangement
USEFUL_DISPLACEMENT = 0.05

# The demonstrator stops pushing once the block's remaining room along the
# commanded direction falls to this margin, so a cloned policy that keeps
# imitating never shoves blocks off the board.
STOP_MARGIN = 0.07

# factor enumerations
COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("cube", "moon", "star", "pentagon", "triangle", "circle")
DIRECTIONS = ("left", "right", "up", "down", "toward_center")
VERB_CLASSES = ("push",)  # single verb class; several surface verbs below

VERB_SURFACES = ("push", "move", "slide", "shift", "nudge")

DIRECTION_PHRASES = {
    0: ("to the left", "leftwards", "left", "to the left side", "over to the left"),
    1: ("to the right", "rightwards", "right", "to the right side", "over to the right"),
    2: ("up", "upwards", "upward", "to the top"),
    3: ("down", "downwards", "downward", "to the bottom"),
    4: ("to the center", "to the middle", "towards the center", "towards the middle",
        "toward the middle"),
}

_FRAMES = (
    "{verb} the {color} {shape} {direction}",
    "please {verb} the {color} {shape} {direction}",
    "can you {verb} the {color} {shape} {direction}",
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
CAPTION_LEN = 16

_WORDS = (
    list(VERB_SURFACES)
    + ["the", "to", "towards", "toward", "please", "can", "you", "over"]
    + list(COLORS)
    + list(SHAPES)
    + ["left", "right", "up", "down"]
    + ["leftwards", "rightwards", "upwards", "downwards", "upward", "downward"]
    + ["side", "top", "bottom", "center", "middle"]
)
VOCAB = ("<pad>", "<bos>", "<eos>", "<unk>") + tuple(_WORDS)
VOCAB_SIZE = len(VOCAB)
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

_PHRASE_TO_DIRECTION = {
    phrase: direction
    for direction, phrases in DIRECTION_PHRASES.items()
    for phrase in phrases
}


class DemoRejected(Exception):
    """Retriable: the sampled board does not admit this demonstration."""


@dataclass
class BoardState:
    """Effector position, block positions, and per-block (color, shape) ids.

    Positions are float32. Attributes are shared metadata for the whole
    dataset; they are not part of the flat state vector.
    """

    effector_pos: np.ndarray  # (2,)
    block_pos: np.ndarray  # (N_BLOCKS, 2)
    block_attrs: np.ndarray  # (N_BLOCKS, 2) int: color_id, shape_id

    def __post_init__(self):
        self.effector_pos = np.asarray(self.effector_pos, dtype=np.float32).reshape(2)
        self.block_pos = np.asarray(self.block_pos, dtype=np.float32).reshape(N_BLOCKS, 2)
        self.block_attrs = np.asarray(self.block_attrs, dtype=np.int64).reshape(N_BLOCKS, 2)

    def as_vector(self) -> np.ndarray:
        """Flat state vector: effector then blocks, (STATE_DIM,) float32."""
        return np.concatenate([self.effector_pos, self.block_pos.reshape(-1)])

    def validate(self):
        if not np.all((self.effector_pos >= BOARD_LO) & (self.effector_pos <= BOARD_HI)):
            raise ValueError("effector outside the board")
        if not np.all((self.block_pos >= BOARD_LO) & (self.block_pos <= BOARD_HI)):
            raise ValueError("block outside the board")
        pairs = {tuple(a) for a in self.block_attrs.tolist()}
        if len(pairs) != N_BLOCKS:
            raise ValueError("duplicate (color, shape) attribute pair")
        for c, s in pairs:
            if not (0 <= c < len(COLORS) and 0 <= s < len(SHAPES)):
                raise ValueError("attribute id out of range")

    def __eq__(self, other):
        if not isinstance(other, BoardState):
            return NotImplemented
        return (
            np.array_equal(self.effector_pos, other.effector_pos)
            and np.array_equal(self.block_pos, other.block_pos)
            and np.array_equal(self.block_attrs, other.block_attrs)
        )


@dataclass
class Action:
    """2D delta setpoint for the effector, componentwise within [-A_MAX, A_MAX]."""

    delta: np.ndarray  # (2,)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32).reshape(2)
        if np.any(np.abs(self.delta) > A_MAX + 1e-6):
            raise ValueError(f"action component exceeds {A_MAX}: {self.delta}")

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return np.array_equal(self.delta, other.delta)


@dataclass
class Trajectory:
    """T+1 states and T actions linked by the simulator transition."""

    states: list  # of BoardState
    actions: list  # of Action

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def state_matrix(self) -> np.ndarray:
        """(T+1, STATE_DIM) float32."""
        return np.stack([s.as_vector() for s in self.states])

    def action_matrix(self) -> np.ndarray:
        """(T, 2) float32."""
        return np.stack([a.delta for a in self.actions])

    def validate(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("state/action length mismatch")
        if not (T_MIN <= self.horizon <= T_MAX):
            raise ValueError(f"horizon {self.horizon} outside [{T_MIN}, {T_MAX}]")
        for t, action in enumerate(self.actions):
            if step(self.states[t], action) != self.states[t + 1]:
                raise ValueError(f"transition mismatch at step {t}")

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.states == other.states and self.actions == other.actions


@dataclass(frozen=True)
class CaptionFactors:
    """Ground-truth slots of a caption: verb class, block attributes, direction."""

    verb_id: int
    color_id: int
    shape_id: int
    direction_id: int

    def __post_init__(self):
        if not (0 <= self.verb_id < len(VERB_CLASSES)):
            raise ValueError("verb_id out of range")
        if not (0 <= self.color_id < len(COLORS)):
            raise ValueError("color_id out of range")
        if not (0 <= self.shape_id < len(SHAPES)):
            raise ValueError("shape_id out of range")
        if not (0 <= self.direction_id < len(DIRECTIONS)):
            raise ValueError("direction_id out of range")

    def triple(self):
        return (self.color_id, self.shape_id, self.direction_id)


def step(state: BoardState, action: Action) -> BoardState:
    """One simulator transition.

    The effector moves by the action delta (clipped to the board). The motion
    is resolved in substeps; any block whose center comes within the contact
    radius of the effector is projected out of the disc, which pushes it along
    the motion. Blocks are never clipped to the board. Total and deterministic.
    """
    start = state.effector_pos.astype(np.float64)
    delta = action.delta.astype(np.float64)
    end = np.clip(start + delta, BOARD_LO, BOARD_HI)
    motion = end - start
    if not np.any(motion):
        return BoardState(state.effector_pos.copy(), state.block_pos.copy(), state.block_attrs)

    motion_dir = motion / np.linalg.norm(motion)
    blocks = state.block_pos.astype(np.float64)
    for i in range(1, N_SUBSTEPS + 1):
        pos = start + motion * (i / N_SUBSTEPS)
        off = blocks - pos
        dist = np.linalg.norm(off, axis=1)
        hit = dist < CONTACT_RADIUS
        if not np.any(hit):
            continue
        safe = np.maximum(dist[hit], 1e-12)[:, None]
        out_dir = np.where(dist[hit, None] > 1e-12, off[hit] / safe, motion_dir)
        blocks[hit] = pos + out_dir * CONTACT_RADIUS
    return BoardState(
        end.astype(np.float32), blocks.astype(np.float32), state.block_attrs
    )


def _direction_unit(block_pos: np.ndarray, direction_id: int) -> np.ndarray:
    units = {
        0: np.array([-1.0, 0.0]),
        1: np.array([1.0, 0.0]),
        2: np.array([0.0, 1.0]),
        3: np.array([0.0, -1.0]),
    }
    if direction_id in units:
        return units[direction_id]
    center = np.array([0.5, 0.5])
    off = center - block_pos.astype(np.float64)
    norm = np.linalg.norm(off)
    if norm < 1e-9:
        raise DemoRejected("block already at the center")
    return off / norm


def _push_room(block_pos: np.ndarray, direction_id: int) -> float:
    """Free run along the push direction before the block leaves the board."""
    x, y = float(block_pos[0]), float(block_pos[1])
    if direction_id == 0:
        return x - BOARD_LO
    if direction_id == 1:
        return BOARD_HI - x
    if direction_id == 2:
        return BOARD_HI - y
    if direction_id == 3:
        return y - BOARD_LO
    return float(np.linalg.norm(np.array([0.5, 0.5]) - block_pos.astype(np.float64)))


# capture window: the relative pose from which the demonstrator pushes
_APPROACH_GAP = 0.03
_CAPTURE_ALONG = 0.12
_CAPTURE_LATERAL = 0.03
_NAV_CLEAR = CONTACT_RADIUS + 0.03
# push advance per step, kept below CONTACT_RADIUS so the contact's lateral
# drift gain (advance/CONTACT_RADIUS) stays under 1 and small servo errors
# decay instead of compounding
_PUSH_ADVANCE = 0.035


def demo_action(state: BoardState, target_block: int, direction_id: int) -> np.ndarray:
    """The demonstrator's feedback rule, a pure function of the current state.

    Hold once the target's remaining room reaches STOP_MARGIN; push while
    the effector sits in the capture window behind the target; otherwise
    head for the capture point, bending around whichever block obstructs
    the straight line first. Memorylessness is the point: a policy cloned
    from these actions faces a well-posed regression and self-corrects when
    rolled out, because the rule never depends on how the state was reached.
    """
    room = _push_room(state.block_pos[target_block], direction_id)
    if room <= STOP_MARGIN:
        return np.zeros(2)
    block = state.block_pos[target_block].astype(np.float64)
    e = state.effector_pos.astype(np.float64)
    unit = _direction_unit(state.block_pos[target_block], direction_id)
    off = block - e
    along = float(off @ unit)
    lateral = float(np.linalg.norm(off - along * unit))
    if 0.0 < along <= _CAPTURE_ALONG and lateral <= _CAPTURE_LATERAL:
        # Pushing servo. A block in contact slides sideways at roughly
        # push_speed/CONTACT_RADIUS times the effector's lateral offset, so
        # plain pursuit of the point behind the block diverges; doubling
        # the lateral term overcorrects enough to stay centered.
        lat_vec = off - along * unit
        chase = unit * (along - CONTACT_RADIUS + _PUSH_ADVANCE) + 2.0 * lat_vec
        norm = float(np.linalg.norm(chase))
        return chase if norm <= A_MAX else chase * (A_MAX / norm)
    goal = np.clip(block - unit * (CONTACT_RADIUS + _APPROACH_GAP), BOARD_LO, BOARD_HI)
    to_goal = goal - e
    dist = float(np.linalg.norm(to_goal))
    if dist < 1e-9:
        return np.zeros(2)
    heading = to_goal / dist
    nearest = None
    for j in range(N_BLOCKS):
        p = state.block_pos[j].astype(np.float64)
        t = float(np.clip((p - e) @ heading, 0.0, dist))
        if t <= 1e-9 or t >= dist - 1e-9:
            continue
        if float(np.linalg.norm(p - (e + heading * t))) < _NAV_CLEAR:
            if nearest is None or t < nearest[0]:
                nearest = (t, p)
    if nearest is not None:
        _, p = nearest
        rej = p - e - float((p - e) @ heading) * heading
        norm = float(np.linalg.norm(rej))
        perp = -rej / norm if norm > 1e-9 else np.array([-heading[1], heading[0]])
        goal = np.clip(p + perp * (_NAV_CLEAR + 0.02), BOARD_LO, BOARD_HI)
        to_goal = goal - e
        dist = float(np.linalg.norm(to_goal))
        if dist < 1e-9:
            return np.zeros(2)
        heading = to_goal / dist
    return heading * min(A_MAX * 0.9, dist)


def scripted_demo(
    board: BoardState, target_block: int, direction_id: int, rng_seed: int
) -> tuple[Trajectory, CaptionFactors]:
    """Scripted push demonstration driven by the demo_action feedback rule:
    approach the side of the target opposite the push direction, push until
    the block's remaining room falls to STOP_MARGIN, then hold.

    Every step carries a small uniform jitter controlled by ``rng_seed``,
    and the push length is randomized through the sampled geometry (how far
    the block starts from its stop line). The result is verified: the
    target must travel at least USEFUL_DISPLACEMENT along the commanded
    direction, no other block may be disturbed, and every block must end on
    the board. Raises DemoRejected (retriable) when the board does not
    admit the demo after 10 jittered attempts.
    """
    if not (0 <= target_block < N_BLOCKS):
        raise ValueError("target_block out of range")
    block0 = board.block_pos[target_block].astype(np.float64)
    start = board.effector_pos.astype(np.float64)
    room0 = _push_room(board.block_pos[target_block], direction_id)
    if room0 < STOP_MARGIN + USEFUL_DISPLACEMENT + 0.01:
        raise DemoRejected(
            f"block {target_block} too close to its stop line for direction "
            f"{DIRECTIONS[direction_id]}"
        )
    unit0 = _direction_unit(board.block_pos[target_block], direction_id)
    capture0 = block0 - unit0 * (CONTACT_RADIUS + _APPROACH_GAP)
    steps_lower_bound = (
        float(np.linalg.norm(capture0 - start)) / (A_MAX * 0.9)
        + (room0 - STOP_MARGIN) / _PUSH_ADVANCE
    )
    if steps_lower_bound > T_MAX - 1:
        raise DemoRejected("approach and push cannot fit the horizon")
    attrs = board.block_attrs[target_block]
    factors = CaptionFactors(0, int(attrs[0]), int(attrs[1]), direction_id)

    for attempt in range(10):
        rng = philox_generator("demo", rng_seed, attempt)
        state = BoardState(start.astype(np.float32), board.block_pos.copy(), board.block_attrs)
        states = [state]
        actions = []
        stopped = False
        for _ in range(T_MAX):
            if _push_room(state.block_pos[target_block], direction_id) <= STOP_MARGIN:
                stopped = True
                break
            delta = demo_action(state, target_block, direction_id)
            delta = delta + rng.uniform(-0.005, 0.005, size=2)
            action = Action(np.clip(delta, -A_MAX, A_MAX))
            state = step(state, action)
            states.append(state)
            actions.append(action)
        if not stopped:
            continue  # budget ran out before the stop line; retry with fresh jitter
        # A generous hold tail teaches the cloned policy to stand still at the
        # stop line; it would otherwise see too few stopped states to weight
        # them against the push steps.
        n_hold = min(4 + int(rng.integers(0, 4)), T_MAX - len(actions))
        n_hold = max(n_hold, T_MIN - len(actions))
        if len(actions) + n_hold > T_MAX:
            continue
        for _ in range(n_hold):
            action = Action(rng.uniform(-0.005, 0.005, size=2))
            state = step(state, action)
            states.append(state)
            actions.append(action)

        moved = np.linalg.norm(
            state.block_pos.astype(np.float64) - board.block_pos.astype(np.float64), axis=1
        )
        moved[target_block] = 0.0
        if moved.max() > 0.02:
            continue  # a bystander was disturbed; retry with fresh jitter
        net = float(
            np.dot(state.block_pos[target_block].astype(np.float64) - block0, unit0)
        )
        traj = Trajectory(states, actions)
        if net >= USEFUL_DISPLACEMENT + 0.005 and is_useful(traj):
            return traj, factors
    raise DemoRejected("no clear approach/push found in 10 attempts")


def is_useful(traj: Trajectory) -> bool:
    """True iff some block moved by at least USEFUL_DISPLACEMENT and every
    block's final position is still on the board."""
    first = traj.states[0].block_pos.astype(np.float64)
    last = traj.states[-1].block_pos.astype(np.float64)
    moved = np.linalg.norm(last - first, axis=1).max() >= USEFUL_DISPLACEMENT
    on_board = bool(np.all((last >= BOARD_LO) & (last <= BOARD_HI)))
    return bool(moved) and on_board


def tokenize(words: list[str]) -> np.ndarray:
    """BOS-prefixed, EOS-terminated, PAD-padded token ids of length CAPTION_LEN."""
    if len(words) > CAPTION_LEN - 2:
        raise ValueError("caption too long for the fixed token budget")
    ids = [BOS] + [_WORD_TO_ID.get(w, UNK) for w in words] + [EOS]
    ids += [PAD] * (CAPTION_LEN - len(ids))
    return np.asarray(ids, dtype=np.int64)


def caption_words(tokens) -> list[str]:
    """Surface words of a token sequence, specials stripped."""
    words = []
    for t in np.asarray(tokens).tolist():
        if t in (BOS, PAD):
            continue
        if t == EOS:
            break
        if 0 <= t < VOCAB_SIZE:
            words.append(VOCAB[t])
        else:
            words.append("<bad>")
    return words


def caption_to_string(tokens) -> str:
    return " ".join(caption_words(tokens))


def render_caption(factors: CaptionFactors, rng_seed: int) -> np.ndarray:
    """One surface realisation of the factors, tokenized. Deterministic in
    (factors, rng_seed); different seeds give different surface forms."""
    rng = philox_generator(
        "caption", rng_seed, factors.verb_id, factors.color_id,
        factors.shape_id, factors.direction_id,
    )
    frame = _FRAMES[rng.integers(len(_FRAMES))]
    verb = VERB_SURFACES[rng.integers(len(VERB_SURFACES))]
    phrases = DIRECTION_PHRASES[factors.direction_id]
    direction = phrases[rng.integers(len(phrases))]
    text = frame.format(
        verb=verb,
        color=COLORS[factors.color_id],
        shape=SHAPES[factors.shape_id],
        direction=direction,
    )
    return tokenize(text.split())


def parse_caption(tokens) -> CaptionFactors | None:
    """Invert the templater; None for anything outside the grammar."""
    arr = np.asarray(tokens).reshape(-1)
    if np.any(arr < 0) or np.any(arr >= VOCAB_SIZE):
        return None
    words = caption_words(arr)
    if not words or "<unk>" in words:
        return None
    i = 0
    if words[0] == "please":
        i = 1
    elif words[:2] == ["can", "you"]:
        i = 2
    if len(words) < i + 4:
        return None
    if words[i] not in VERB_SURFACES:
        return None
    if words[i + 1] != "the":
        return None
    if words[i + 2] not in COLORS or words[i + 3] not in SHAPES:
        return None
    phrase = " ".join(words[i + 4 :])
    direction = _PHRASE_TO_DIRECTION.get(phrase)
    if direction is None:
        return None
    return CaptionFactors(
        0, COLORS.index(words[i + 2]), SHAPES.index(words[i + 3]), direction
    )


def sample_attr_table(rng: np.random.Generator) -> np.ndarray:
    """8 distinct (color, shape) pairs out of the 24 combinations."""
    picks = rng.choice(len(COLORS) * len(SHAPES), size=N_BLOCKS, replace=False)
    return np.stack([picks // len(SHAPES), picks % len(SHAPES)], axis=1).astype(np.int64)


def sample_board(
    attrs: np.ndarray, rng: np.random.Generator, min_separation: float = 0.12
) -> BoardState:
    """Random board: blocks uniform in the inner region with a minimum pairwise
    separation, effector anywhere not already touching a block."""
    for _ in range(1000):
        blocks = rng.uniform(0.15, 0.85, size=(N_BLOCKS, 2))
        diff = blocks[:, None, :] - blocks[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        dist[np.diag_indices(N_BLOCKS)] = np.inf
        if dist.min() >= min_separation:
            break
    else:
        raise RuntimeError("could not place blocks")
    for _ in range(1000):
        eff = rng.uniform(0.03, 0.97, size=2)
        if np.linalg.norm(blocks - eff, axis=1).min() > CONTACT_RADIUS + 0.01:
            break
    else:
        raise RuntimeError("could not place effector")
    board = BoardState(eff.astype(np.float32), blocks.astype(np.float32), attrs)
    board.validate()
    return board
