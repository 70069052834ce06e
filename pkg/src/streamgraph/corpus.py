"""Synthetic tweet corpus generator.

Produces a JSONL file shaped like the reference tweet mapping expects:
hashtags drawn from a Zipf-like vocabulary, mentions from a fixed user
pool, plus an optional share of dirty lines (malformed JSON, emoji-only
text, records missing the user key) to exercise filtering and skip
accounting. Fully deterministic for a given seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

_WORDS = (
    "graph stream buffer batch window model deploy branch merge release "
    "metric signal latency commit sensor cache router cluster index shard "
    "replica worker queue broker packet socket kernel thread vector tensor"
).split()

_EMOJI_TEXTS = ("\U0001F525\U0001F525\U0001F525", "\U0001F680✨",
                "\U0001F389\U0001F389", "⚡", "\U0001F600 \U0001F600")


@dataclass
class CorpusSpec:
    """Knobs for one generated corpus."""

    n_records: int = 2000
    seed: int = 7
    vocab: int = 500           # hashtag vocabulary size
    zipf_s: float = 1.15       # rank exponent of hashtag popularity
    users: int = 350           # size of the author/mention pool
    hashtag_weights: tuple = (0.30, 0.35, 0.20, 0.10, 0.04, 0.01)
    mention_weights: tuple = (0.60, 0.30, 0.08, 0.02)
    dirty_fraction: float = 0.0
    keywords: tuple = ()       # injected into text
    keyword_fraction: float = 0.0

    def problems(self) -> list[str]:
        out = []
        if self.n_records <= 0:
            out.append(f"n_records must be > 0, got {self.n_records}")
        if self.vocab <= 0:
            out.append(f"vocab must be > 0, got {self.vocab}")
        if self.zipf_s <= 0:
            out.append(f"zipf_s must be > 0, got {self.zipf_s}")
        if self.users <= 0:
            out.append(f"users must be > 0, got {self.users}")
        if not 0 <= self.dirty_fraction < 1:
            out.append(f"dirty_fraction must be in [0, 1), got {self.dirty_fraction}")
        if not 0 <= self.keyword_fraction <= 1:
            out.append(f"keyword_fraction must be in [0, 1], got {self.keyword_fraction}")
        return out


@dataclass
class CorpusStats:
    lines: int = 0
    clean: int = 0
    malformed: int = 0
    emoji_only: int = 0
    missing_user: int = 0
    hashtag_occurrences: int = 0
    mention_occurrences: int = 0
    counts_by_kind: dict = field(default_factory=dict)


def _zipf_weights(vocab: int, s: float) -> list[float]:
    return [1.0 / (rank ** s) for rank in range(1, vocab + 1)]


def generate_corpus(path: str | Path, spec: CorpusSpec) -> CorpusStats:
    """Write spec.n_records JSONL lines; returns per-kind counts."""
    problems = spec.problems()
    if problems:
        raise ValueError("; ".join(problems))
    rng = random.Random(spec.seed)
    tags = [f"tag{r:04d}" for r in range(spec.vocab)]
    tag_weights = _zipf_weights(spec.vocab, spec.zipf_s)
    handles = [f"user{u:04d}" for u in range(spec.users)]
    h_counts = list(range(len(spec.hashtag_weights)))
    m_counts = list(range(len(spec.mention_weights)))
    stats = CorpusStats()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w", encoding="utf-8") as fh:
        for i in range(spec.n_records):
            dirty = rng.random() < spec.dirty_fraction
            kind = rng.choice(("malformed", "emoji", "no-user")) if dirty else "clean"
            author = rng.choice(handles)
            n_tags = rng.choices(h_counts, spec.hashtag_weights)[0]
            n_mentions = rng.choices(m_counts, spec.mention_weights)[0]
            # Case-jitter on some hashtags: identity must survive lowercasing.
            chosen = rng.choices(tags, tag_weights, k=n_tags)
            chosen = [t.capitalize() if rng.random() < 0.2 else t for t in chosen]
            mentions = rng.sample(handles, k=min(n_mentions, len(handles)))
            words = rng.choices(_WORDS, k=rng.randint(3, 8))
            if spec.keywords and rng.random() < spec.keyword_fraction:
                words.insert(rng.randrange(len(words)),
                             rng.choice(list(spec.keywords)))
            text = " ".join(words + [f"#{t}" for t in chosen]
                            + [f"@{m}" for m in mentions])
            record = {
                "id": f"t{i:07d}",
                "text": text,
                "lang": "en",
                "created_at": 1700000000 + i,
                "user": {
                    "screen_name": author,
                    "name": author.replace("user", "User "),
                    "followers": rng.randint(0, 5000),
                },
                "entities": {
                    "hashtags": [{"text": t} for t in chosen],
                    "mentions": [{"screen_name": m} for m in mentions],
                },
            }
            if kind == "emoji":
                record["text"] = rng.choice(_EMOJI_TEXTS)
                record["entities"] = {"hashtags": [], "mentions": []}
                stats.emoji_only += 1
            elif kind == "no-user":
                del record["user"]["screen_name"]
                stats.missing_user += 1
            elif kind == "clean":
                stats.hashtag_occurrences += len(chosen)
                stats.mention_occurrences += len(mentions)
            line = json.dumps(record, separators=(",", ":"), sort_keys=True)
            if kind == "malformed":
                line = line[: max(2, len(line) // 2)]
                stats.malformed += 1
            elif kind == "clean":
                stats.clean += 1
            fh.write(line + "\n")
            stats.lines += 1
            stats.counts_by_kind[kind] = stats.counts_by_kind.get(kind, 0) + 1
    log.info("wrote %d lines to %s (%d malformed, %d emoji-only, %d missing user)",
             stats.lines, path, stats.malformed, stats.emoji_only,
             stats.missing_user)
    return stats


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate a synthetic tweet corpus (JSONL).")
    parser.add_argument("--out", required=True, help="output JSONL path")
    parser.add_argument("--records", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--vocab", type=int, default=500)
    parser.add_argument("--zipf-s", type=float, default=1.15)
    parser.add_argument("--users", type=int, default=350)
    parser.add_argument("--dirty-fraction", type=float, default=0.0)
    parser.add_argument("--keywords", default="",
                        help="comma separated words injected into tweet text")
    parser.add_argument("--keyword-fraction", type=float, default=0.0)
    args = parser.parse_args(argv)
    keywords = tuple(k for k in args.keywords.split(",") if k)
    spec = CorpusSpec(n_records=args.records, seed=args.seed, vocab=args.vocab,
                      zipf_s=args.zipf_s, users=args.users,
                      dirty_fraction=args.dirty_fraction, keywords=keywords,
                      keyword_fraction=args.keyword_fraction)
    stats = generate_corpus(args.out, spec)
    print(f"wrote {stats.lines} lines to {args.out} "
          f"({stats.malformed} malformed, {stats.emoji_only} emoji-only, "
          f"{stats.missing_user} missing-user)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
