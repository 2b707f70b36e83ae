"""Deterministic synthetic fact corpus: fictitious authors with QA pairs.

The vocabulary is a closed, word-level set of exactly 64 tokens built from
the template grammar below.  Each entity is a (first, last) name pair with
up to four attributes; every fact yields a question plus three evaluation
surfaces:

* answer: the canonical question followed by the bare value token (this
  is what training sees);
* paraphrase_answer: an alternate surface form of the same fact - the
  question words reordered, followed by the same value;
* perturbed_answers: the canonical question followed by k=3 wrong values
  from the same pool (template-identical to the true answer, differing in
  the value token only).

Everything is a pure function of (seed, sizes): same inputs, bit-identical
corpora and splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GenerationError
from .model import BOS, EOS, PAD, UNK, TokenSeq

_SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]
_WORDS = (
    "? where was born what genre does write which award did win when published "
    "in the of year i don't know answer"
).split()
FIRST_NAMES = "aria bram cora dane elif finn gwen holt iris jude".split()
LAST_NAMES = "ashford bell crane dorn frost gale hart ives".split()
# pools are sized so a typical forget set leaves most retain values untouched;
# smaller pools couple forget and retain pairs through shared value tokens
CITIES = "harborview lowmarsh midvale northgate oakhollow pinecrest quarry redwharf saltmere tarnbrook".split()
GENRES = "mystery satire memoir thriller poetry folklore drama essays fables westerns".split()
AWARDS = "lantern meridian foxglove harvest beacon ember garland isthmus juniper keystone".split()
YEARS = "1951 1957 1962 1968 1973 1979 1984 1990 1995 2001".split()

VOCAB: tuple[str, ...] = tuple(
    _SPECIALS + _WORDS + FIRST_NAMES + LAST_NAMES + CITIES + GENRES + AWARDS + YEARS
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)  # 84

ATTRIBUTES = ("birth_city", "genre", "award", "debut")
_POOLS = {"birth_city": CITIES, "genre": GENRES, "award": AWARDS, "debut": YEARS}
_Q_TEMPLATES = {
    "birth_city": "where was {first} {last} born ?",
    "genre": "what genre does {first} {last} write ?",
    "award": "which award did {first} {last} win ?",
    "debut": "when was {first} {last} published ?",
}
# answers are the bare value token: the question carries all surface
# structure, so text metrics on the answer measure the fact alone
_A_TEMPLATES = {a: "{value}" for a in ATTRIBUTES}
# reordered question surfaces for the paraphrase evaluation
_PQ_TEMPLATES = {
    "birth_city": "{first} {last} was born where ?",
    "genre": "{first} {last} does write what genre ?",
    "award": "the award of {first} {last} was which ?",
    "debut": "in what year was {first} {last} published ?",
}

N_PERTURBED = 5


def encode(text: str) -> tuple[int, ...]:
    """Whitespace tokenization against the closed vocabulary (case-insensitive)."""
    return tuple(TOKEN_ID.get(w, UNK) for w in text.lower().split())


def decode(ids: Iterable[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i not in (PAD, BOS, EOS))


@dataclass(frozen=True)
class FactRecord:
    entity_id: int
    first: str
    last: str
    attribute: str
    value: str

    @property
    def entity_name(self) -> str:
        return f"{self.first} {self.last}"


@dataclass(frozen=True)
class QAPair:
    question: TokenSeq  # prompt only (bos + question words)
    answer: TokenSeq  # prompt + answer words + eos
    paraphrase_answer: TokenSeq
    perturbed_answers: tuple[TokenSeq, ...]
    fact: FactRecord
    original_answer: TokenSeq | None = None  # set when a target replaced the answer

    def answer_words(self) -> tuple[int, ...]:
        """Answer tokens without the trailing eos (for text metrics)."""
        toks = self.answer.answer_tokens
        return toks[:-1] if toks and toks[-1] == EOS else toks


@dataclass(frozen=True)
class DatasetSplit:
    retain: tuple[QAPair, ...]
    forget: tuple[QAPair, ...]
    heldout_world: tuple[QAPair, ...]
    forget_ratio: float

    def all_train(self) -> tuple[QAPair, ...]:
        return self.retain + self.forget


def _completion(prompt: tuple[int, ...], words: str) -> TokenSeq:
    body = encode(words)
    return TokenSeq(prompt + body + (EOS,), answer_len=len(body) + 1)


def _build_pair(fact: FactRecord, wrong_values: Sequence[str]) -> QAPair:
    prompt = (BOS,) + encode(_Q_TEMPLATES[fact.attribute].format(first=fact.first, last=fact.last))
    pq = (BOS,) + encode(_PQ_TEMPLATES[fact.attribute].format(first=fact.first, last=fact.last))
    a_tpl = _A_TEMPLATES[fact.attribute]
    return QAPair(
        question=TokenSeq(prompt),
        answer=_completion(prompt, a_tpl.format(value=fact.value)),
        paraphrase_answer=_completion(pq, a_tpl.format(value=fact.value)),
        perturbed_answers=tuple(_completion(prompt, a_tpl.format(value=w)) for w in wrong_values),
        fact=fact,
    )


def _balanced_values(pool: Sequence[str], n: int, rng: np.random.Generator) -> list[str]:
    """n values drawn so that pool-item counts stay within +-1 of each other."""
    out: list[str] = []
    while len(out) < n:
        block = list(pool)
        rng.shuffle(block)
        out.extend(block)
    return out[:n]


def _all_name_pairs() -> list[tuple[str, str]]:
    return [(f, l) for f in FIRST_NAMES for l in LAST_NAMES]


def generate_corpus(seed: int, n_entities: int = 50, attrs_per_entity: int = 4) -> list[QAPair]:
    """n_entities x attrs_per_entity QA pairs from the template grammar."""
    if n_entities < 10:
        raise ValueError(f"n_entities must be >= 10, got {n_entities}")
    if not 2 <= attrs_per_entity <= len(ATTRIBUTES):
        raise ValueError(f"attrs_per_entity must be in [2, {len(ATTRIBUTES)}]")
    combos = _all_name_pairs()
    if n_entities > len(combos):
        raise GenerationError(
            f"value pools exhausted: {n_entities} entities requested, "
            f"{len(combos)} name combinations available"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    names = [combos[i] for i in order[:n_entities]]
    attrs = ATTRIBUTES[:attrs_per_entity]
    values = {a: _balanced_values(_POOLS[a], n_entities, rng) for a in attrs}

    pairs: list[QAPair] = []
    for eid, (first, last) in enumerate(names):
        for a in attrs:
            fact = FactRecord(eid, first, last, a, values[a][eid])
            pool = [v for v in _POOLS[a] if v != fact.value]
            wrong_idx = rng.permutation(len(pool))[:N_PERTURBED]
            pairs.append(_build_pair(fact, [pool[i] for i in wrong_idx]))
    return pairs


def _entities_of(pairs: Iterable[QAPair]) -> list[tuple[str, str]]:
    seen: dict[tuple[str, str], None] = {}
    for p in pairs:
        seen.setdefault((p.fact.first, p.fact.last), None)
    return list(seen)


def _fresh_heldout(
    corpus: Sequence[QAPair], n_heldout: int, seed: int
) -> tuple[QAPair, ...]:
    """QA pairs for entities never seen in the corpus (utility evaluation)."""
    used = set(_entities_of(corpus))
    free = [c for c in _all_name_pairs() if c not in used]
    if len(free) < n_heldout:
        raise GenerationError(
            f"value pools exhausted: {n_heldout} heldout entities requested, {len(free)} free"
        )
    attrs = tuple(dict.fromkeys(p.fact.attribute for p in corpus))
    rng = np.random.default_rng(seed + 7919)
    order = rng.permutation(len(free))
    names = [free[i] for i in order[:n_heldout]]
    values = {a: _balanced_values(_POOLS[a], n_heldout, rng) for a in attrs}
    out: list[QAPair] = []
    for i, (first, last) in enumerate(names):
        for a in attrs:
            fact = FactRecord(10_000 + i, first, last, a, values[a][i])
            pool = [v for v in _POOLS[a] if v != fact.value]
            wrong_idx = rng.permutation(len(pool))[:N_PERTURBED]
            out.append(_build_pair(fact, [pool[i2] for i2 in wrong_idx]))
    return tuple(out)


def split_by_ratio(
    corpus: Sequence[QAPair], forget_ratio: float, seed: int, heldout_entities: int = 5
) -> DatasetSplit:
    """Entity-level split: every pair of a forgotten entity goes to the forget set."""
    if not 0.0 < forget_ratio < 1.0:
        raise ValueError(f"forget_ratio must be in (0, 1), got {forget_ratio}")
    entities = _entities_of(corpus)
    if len(entities) < 2:
        raise ValueError("need at least 2 entities to split")
    n_forget = max(1, round(forget_ratio * len(entities)))
    if n_forget >= len(entities):
        raise ValueError("forget_ratio leaves no retain entities")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entities))
    forget_set = {entities[i] for i in order[:n_forget]}
    forget = tuple(p for p in corpus if (p.fact.first, p.fact.last) in forget_set)
    retain = tuple(p for p in corpus if (p.fact.first, p.fact.last) not in forget_set)
    return DatasetSplit(
        retain=retain,
        forget=forget,
        heldout_world=_fresh_heldout(corpus, heldout_entities, seed),
        forget_ratio=forget_ratio,
    )


def split_overlap(
    corpus: Sequence[QAPair], forget_ratio: float, seed: int, heldout_entities: int = 5
) -> DatasetSplit:
    """Pair-level split inside shared entities: maximal semantic overlap.

    Each forgotten entity keeps at least one pair in the retain set, so
    every forget entity also appears in retain.
    """
    if not 0.0 < forget_ratio < 1.0:
        raise ValueError(f"forget_ratio must be in (0, 1), got {forget_ratio}")
    n_pairs = len(corpus)
    n_forget = max(1, round(forget_ratio * n_pairs))
    by_entity: dict[tuple[str, str], list[int]] = {}
    for i, p in enumerate(corpus):
        by_entity.setdefault((p.fact.first, p.fact.last), []).append(i)
    if all(len(v) < 2 for v in by_entity.values()):
        raise ValueError("overlap split needs entities with >= 2 pairs")
    rng = np.random.default_rng(seed)
    # Per entity, shuffle its pairs and mark all but one as takeable, then
    # round-robin across entities so the forget set spreads out.
    entity_lists = list(by_entity.values())
    takeable: list[list[int]] = []
    for ei in rng.permutation(len(entity_lists)):
        idxs = list(entity_lists[ei])
        order = rng.permutation(len(idxs))
        takeable.append([idxs[i] for i in order[: len(idxs) - 1]])
    candidates: list[int] = []
    depth = 0
    while len(candidates) < n_forget and any(depth < len(t) for t in takeable):
        for t in takeable:
            if depth < len(t):
                candidates.append(t[depth])
                if len(candidates) == n_forget:
                    break
        depth += 1
    if len(candidates) < n_forget:
        raise ValueError("forget_ratio too large for overlap split")
    forget_idx = set(candidates)
    forget = tuple(corpus[i] for i in sorted(forget_idx))
    retain = tuple(p for i, p in enumerate(corpus) if i not in forget_idx)
    return DatasetSplit(
        retain=retain,
        forget=forget,
        heldout_world=_fresh_heldout(corpus, heldout_entities, seed),
        forget_ratio=forget_ratio,
    )


def make_targeted(pairs: Sequence[QAPair], target_text: str, ctx_len: int = 48) -> list[QAPair]:
    """Replace each pair's answer with the tokenized target; originals preserved."""
    body = encode(target_text)
    if UNK in body:
        raise ValueError(f"target contains out-of-vocabulary words: {target_text!r}")
    out = []
    for p in pairs:
        full = p.question.tokens + body + (EOS,)
        if len(full) > ctx_len:
            raise ValueError(f"target overflows ctx_len {ctx_len}")
        out.append(
            replace(
                p,
                answer=TokenSeq(full, answer_len=len(body) + 1),
                original_answer=p.answer,
            )
        )
    return out


# -- line-delimited JSON interchange --------------------------------------


def _words_of(seq: TokenSeq) -> str:
    return decode(seq.answer_tokens)


def export_jsonl(split: DatasetSplit, path: str | Path) -> None:
    """One UTF-8 JSON record per pair: question, answer, paraphrase, perturbed, ...

    The paraphrase field carries the full alternate surface (reordered
    question plus answer words); perturbed entries carry answer words only.
    """
    rows = []
    for name, pairs in (("retain", split.retain), ("forget", split.forget),
                        ("heldout", split.heldout_world)):
        for p in pairs:
            rows.append(
                {
                    "question": decode(p.question.tokens),
                    "answer": _words_of(p.answer),
                    "paraphrase": decode(p.paraphrase_answer.tokens[1:-1]),
                    "perturbed": [_words_of(s) for s in p.perturbed_answers],
                    "entity": p.fact.entity_name,
                    "attribute": p.fact.attribute,
                    "split": name,
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def import_jsonl(path: str | Path) -> DatasetSplit:
    buckets: dict[str, list[QAPair]] = {"retain": [], "forget": [], "heldout": []}
    with open(path, encoding="utf-8") as fh:
        for eid, line in enumerate(fh):
            row = json.loads(line)
            first, last = row["entity"].split()
            fact = FactRecord(eid, first, last, row["attribute"], row["answer"].split()[-1])
            prompt = (BOS,) + encode(row["question"])
            n_answer = len(row["answer"].split())
            para_words = row["paraphrase"].split()
            para_prompt = (BOS,) + encode(" ".join(para_words[:-n_answer]))
            pair = QAPair(
                question=TokenSeq(prompt),
                answer=_completion(prompt, row["answer"]),
                paraphrase_answer=_completion(para_prompt, " ".join(para_words[-n_answer:])),
                perturbed_answers=tuple(_completion(prompt, w) for w in row["perturbed"]),
                fact=fact,
            )
            buckets[row["split"]].append(pair)
    n_train = len(buckets["retain"]) + len(buckets["forget"])
    ratio = len(buckets["forget"]) / n_train if n_train else 0.0
    return DatasetSplit(
        retain=tuple(buckets["retain"]),
        forget=tuple(buckets["forget"]),
        heldout_world=tuple(buckets["heldout"]),
        forget_ratio=ratio,
    )
