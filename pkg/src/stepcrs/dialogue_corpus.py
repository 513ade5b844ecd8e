"""Dialogue data model, tokenisation, [ITEM] masking, a frozen text encoder,
and a synthetic corpus whose gold items follow the knowledge graph."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .knowledge_graph import KnowledgeGraph
from .numerics import Tensor, layer_norm, no_grad, softmax

log = logging.getLogger(__name__)

PAD, BOS, EOS, CLS, ITEM = "[PAD]", "[BOS]", "[EOS]", "[CLS]", "[ITEM]"
UNK = "[UNK]"
SPECIALS = (PAD, BOS, EOS, CLS, ITEM)
PAD_ID, BOS_ID, EOS_ID, CLS_ID, ITEM_ID = range(5)
UNK_ID = 5

SPEAKERS = ("user", "recommender")

_TOKEN_RE = re.compile(r"\[item\]|\w+|[^\w\s]")


class CorpusError(ValueError):
    pass


@dataclass
class Turn:
    speaker: str
    text: str
    items: list[int] = field(default_factory=list)
    entities: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"speaker": self.speaker, "text": self.text, "items": list(self.items),
                "entities": list(self.entities)}


@dataclass
class Dialogue:
    """One corpus record: the turns up to and including ``target_turn``."""
    id: str
    turns: list[Turn]
    target_turn: int

    def to_json(self) -> dict:
        return {"id": self.id, "turns": [t.to_json() for t in self.turns], "target_turn": self.target_turn}

    @classmethod
    def from_json(cls, obj: dict) -> "Dialogue":
        try:
            turns = [Turn(t["speaker"], t["text"], [int(i) for i in t.get("items", [])],
                          [int(e) for e in t.get("entities", [])]) for t in obj["turns"]]
            return cls(str(obj["id"]), turns, int(obj["target_turn"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"malformed corpus record: {exc}") from exc


@dataclass
class DialogueSample:
    """Context turns s_1..s_t and the recommender response that follows them."""
    id: str
    context: list[Turn]
    response: Turn
    gold_items: list[int]

    @property
    def context_entities(self) -> list[int]:
        """Linked entities of the context, first mention order, de-duplicated."""
        seen: dict[int, None] = {}
        for t in self.context:
            for e in t.entities:
                seen.setdefault(e, None)
        return list(seen)

    @property
    def context_items(self) -> list[int]:
        seen: dict[int, None] = {}
        for t in self.context:
            for e in t.items:
                seen.setdefault(e, None)
        return list(seen)


def validate_dialogue(d: Dialogue, g: KnowledgeGraph) -> None:
    items = set(g.item_ids)
    if not 0 <= d.target_turn < len(d.turns):
        raise CorpusError(f"{d.id}: target_turn {d.target_turn} out of range")
    if d.turns[d.target_turn].speaker != "recommender":
        raise CorpusError(f"{d.id}: target turn speaker must be recommender")
    for k, t in enumerate(d.turns):
        if t.speaker not in SPEAKERS:
            raise CorpusError(f"{d.id} turn {k}: unknown speaker {t.speaker!r}")
        for i in t.items:
            if i not in items:
                raise CorpusError(f"{d.id} turn {k}: item {i} is not a KG item")
        for e in t.entities:
            if not 0 <= e < g.num_entities:
                raise CorpusError(f"{d.id} turn {k}: entity {e} not in KG")


def dialogue_samples(d: Dialogue) -> list[DialogueSample]:
    """Every recommender turn after the first turn, up to the target, with its context."""
    out = []
    for t in range(1, d.target_turn + 1):
        turn = d.turns[t]
        if turn.speaker != "recommender":
            continue
        out.append(DialogueSample(f"{d.id}:{t}", d.turns[:t], turn, list(turn.items)))
    return out


def write_jsonl(dialogues: Iterable[Dialogue], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path, g: KnowledgeGraph | None = None) -> list[Dialogue]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            d = Dialogue.from_json(obj)
            if g is not None:
                validate_dialogue(d, g)
            out.append(d)
    return out


# ---------------------------------------------------------------------------
# tokenisation


def split_words(text: str) -> list[str]:
    return [ITEM if w == "[item]" else w for w in _TOKEN_RE.findall(text.lower())]


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: list[str] = list(SPECIALS) + [UNK]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Vocabulary":
        words: set[str] = set()
        for t in texts:
            words.update(split_words(t))
        for t in extra:
            words.update(split_words(t))
        words.difference_update(SPECIALS)
        return cls(sorted(words))

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        if tuple(tokens[:5]) != SPECIALS or tokens[5] != UNK:
            raise CorpusError("vocabulary does not start with the reserved specials")
        return cls(tokens[6:])


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    return [vocab.index.get(w, UNK_ID) for w in split_words(text)]


def detokenize(vocab: Vocabulary, ids: Iterable[int]) -> str:
    return " ".join(vocab.tokens[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID, CLS_ID))


def mask_items(text: str, mentions: Sequence) -> str:
    """Replace each item mention with the single token ``[ITEM]``.

    Mentions are surface strings (first unconsumed case-insensitive whole-word
    match) or ``(start, end)`` character spans.  A surface form that no longer
    occurs is skipped, which keeps masking idempotent.
    """
    spans: list[tuple[int, int]] = []
    cursor_by_name: dict[str, int] = {}
    for m in mentions:
        if isinstance(m, str):
            start_at = cursor_by_name.get(m.lower(), 0)
            hit = re.compile(r"(?<!\w)" + re.escape(m) + r"(?!\w)", re.IGNORECASE).search(text, start_at)
            if hit is None:
                continue
            cursor_by_name[m.lower()] = hit.end()
            spans.append(hit.span())
        else:
            s, e = int(m[0]), int(m[1])
            if not 0 <= s < e <= len(text):
                raise ValueError(f"invalid mention span {(s, e)} for text of length {len(text)}")
            spans.append((s, e))
    spans.sort()
    for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ValueError(f"overlapping mention spans {(s0, e0)} and {(s1, e1)}")
    pieces, last = [], 0
    for s, e in spans:
        pieces.append(text[last:s])
        pieces.append(f" {ITEM} ")
        last = e
    pieces.append(text[last:])
    return " ".join("".join(pieces).split())


def context_token_ids(vocab: Vocabulary, context: Sequence[Turn], max_len: int) -> list[int]:
    """Turns joined with EOS separators, left-truncated to the ``max_len`` most recent tokens."""
    ids: list[int] = []
    for k, t in enumerate(context):
        if k:
            ids.append(EOS_ID)
        ids.extend(tokenize(vocab, t.text))
    if len(ids) > max_len:
        ids = ids[-max_len:]
    return ids


# ---------------------------------------------------------------------------
# frozen encoder


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def parameter_hash(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class FrozenTextEncoder:
    """Stand-in context encoder: token embeddings, sinusoidal positions and one
    post-norm self-attention block with fixed random weights."""

    def __init__(self, vocab_size: int, dim: int, seed: int = 0, max_len: int = 256, dtype=np.float32,
                 emb_std: float = 1.0, pos_scale: float = 1.0, attn_std: float | None = None,
                 out_scale: float = 1.0):
        rng = np.random.default_rng([seed, 101])
        a = attn_std if attn_std is not None else dim ** -0.5
        self.dim, self.max_len, self.out_scale = dim, max_len, out_scale
        emb = rng.normal(0.0, emb_std, size=(vocab_size, dim))
        emb[CLS_ID] = 0.0
        self.params = {
            "tok_emb": emb.astype(dtype),
            "w_q": rng.normal(0.0, a, size=(dim, dim)).astype(dtype),
            "w_k": rng.normal(0.0, a, size=(dim, dim)).astype(dtype),
            "w_v": rng.normal(0.0, dim ** -0.5, size=(dim, dim)).astype(dtype),
            "w_o": rng.normal(0.0, dim ** -0.5, size=(dim, dim)).astype(dtype),
        }
        for v in self.params.values():
            v.setflags(write=False)
        self._pos = (pos_scale * sinusoidal_positions(max_len + 1, dim, np.float64)).astype(dtype)

    def parameter_hash(self) -> str:
        return parameter_hash(self.params[k] for k in sorted(self.params))

    def encode(self, token_ids: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Return (per-position outputs [L+1, D], t_cls [D]); position 0 is CLS."""
        if len(token_ids) == 0:
            raise CorpusError("cannot encode an empty context")
        ids = [CLS_ID] + list(token_ids)[-self.max_len:]
        p = self.params
        with no_grad():
            x = Tensor(p["tok_emb"][ids] + self._pos[:len(ids)])
            q, k, v = x.data @ p["w_q"], x.data @ p["w_k"], x.data @ p["w_v"]
            att = softmax(Tensor(q @ k.T / np.sqrt(self.dim, dtype=q.dtype)), axis=-1).data
            y = layer_norm(Tensor(x.data + (att @ v) @ p["w_o"])) * self.out_scale
        return y, Tensor(y.data[0])


# ---------------------------------------------------------------------------
# synthetic corpus

_OPENERS = [
    "hi ! i am in the mood for something with {ents} .",
    "hello . can you suggest a movie ? i like {ents} .",
    "hey , i really enjoy {ents} . any ideas ?",
    "i want to watch a film tonight , maybe {ents} ?",
]
_RECOMMENDS = [
    "have you seen {item} ?",
    "how about {item} ?",
    "you might like {item} .",
    "i would suggest {item} , it is great .",
    "{item} could be a good fit .",
]
_FOLLOWUPS = [
    "i have seen that one . what else ?",
    "not really my thing . anything else ?",
    "sounds good , but do you have another one ?",
    "maybe something more like {ents} ?",
]
_CLOSERS_USER = ["thanks , i will check it out !", "great , thank you .", "perfect , thanks !"]
_CLOSERS_REC = ["enjoy the movie !", "you are welcome , have fun !", "glad i could help ."]


def _join_names(names: list[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def kg_item_neighbourhood(g: KnowledgeGraph, seeds: Iterable[int], hops: int = 2,
                          adjacency: list[set[int]] | None = None) -> set[int]:
    """Items reachable from ``seeds`` within ``hops`` undirected steps."""
    adj = adjacency if adjacency is not None else g.undirected_adjacency()
    frontier = set(seeds)
    reached = set(frontier)
    for _ in range(hops):
        frontier = {n for f in frontier for n in adj[f]} - reached
        reached |= frontier
    return reached & set(g.item_ids)


@dataclass
class SyntheticCorpus:
    train: list[Dialogue]
    valid: list[Dialogue]
    test: list[Dialogue]

    @property
    def all(self) -> list[Dialogue]:
        return self.train + self.valid + self.test


def generate_synthetic_corpus(g: KnowledgeGraph, n_dialogues: int, seed: int = 0,
                              p_signal: float = 0.9, max_rounds: int = 3) -> SyntheticCorpus:
    """Template dialogues; the gold item is a KG neighbour of the seeds with prob ``p_signal``."""
    if len(g.item_ids) < 20:
        raise CorpusError(f"synthetic corpus needs at least 20 KG items, graph has {len(g.item_ids)}")
    rng = np.random.default_rng([seed, 7])
    adj = g.undirected_adjacency()
    items = list(g.item_ids)
    item_set = set(items)
    attributes = [e for e in range(g.num_entities) if e not in item_set and adj[e]]
    names = g.entity_names
    dialogues = []
    for n in range(n_dialogues):
        n_seeds = int(rng.integers(1, 4))
        pool = attributes if attributes and rng.random() < 0.85 else items
        seeds = [int(s) for s in rng.choice(pool, size=min(n_seeds, len(pool)), replace=False)]
        turns = [Turn("user", str(rng.choice(_OPENERS)).format(ents=_join_names([names[s] for s in seeds])),
                      [s for s in seeds if s in item_set], list(seeds))]
        mentioned = set(turns[0].items)
        n_rounds = int(rng.integers(1, max_rounds + 1))
        hood = kg_item_neighbourhood(g, seeds, adjacency=adj)
        for r in range(n_rounds):
            signal = rng.random() < p_signal
            cands = sorted((hood if signal else item_set) - mentioned)
            if not cands:
                if r:
                    break
                cands = sorted(hood if signal else item_set)
            if r:
                template = str(rng.choice(_FOLLOWUPS))
                turns.append(Turn("user", template.format(ents=_join_names([names[s] for s in seeds])), [],
                                  list(seeds) if "{ents}" in template else []))
            gold = int(cands[rng.integers(len(cands))])
            mentioned.add(gold)
            turns.append(Turn("recommender", str(rng.choice(_RECOMMENDS)).format(item=names[gold]), [gold], [gold]))
        target = len(turns) - 1
        if rng.random() < 0.5:
            turns.append(Turn("user", str(rng.choice(_CLOSERS_USER))))
            turns.append(Turn("recommender", str(rng.choice(_CLOSERS_REC))))
            target = len(turns) - 1
        dialogues.append(Dialogue(f"d{n:05d}", turns, target))
    order = rng.permutation(n_dialogues)
    n_train = int(round(0.8 * n_dialogues))
    n_valid = int(round(0.1 * n_dialogues))
    pick = lambda idx: [dialogues[i] for i in sorted(idx)]
    return SyntheticCorpus(pick(order[:n_train]), pick(order[n_train:n_train + n_valid]),
                           pick(order[n_train + n_valid:]))


def build_vocabulary(corpus: Iterable[Dialogue], g: KnowledgeGraph) -> Vocabulary:
    texts = (t.text for d in corpus for t in d.turns)
    return Vocabulary.build(texts, extra=g.entity_names)
