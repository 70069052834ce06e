import json
from pathlib import Path

import pytest

from streamgraph.config import packaged_map_path
from streamgraph.mapping import load_mapping

# (criterion number, description, passed) rows filled in by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[int, str, bool]] = []

REPO_ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = REPO_ROOT / "scenarios"
DATA_DIR = Path(__file__).resolve().parent / "data"
GOLDEN_DIR = Path(__file__).resolve().parent / "golden"


@pytest.fixture(scope="session")
def tweet_map():
    return load_mapping(packaged_map_path())


def make_tweet(tweet_id="t1", author="alice", hashtags=(), mentions=(),
               text="hello world", lang="en", created_at=1700000000,
               name=None, followers=321):
    """Payload in the shape the reference mapping expects."""
    return {
        "id": tweet_id,
        "text": text,
        "lang": lang,
        "created_at": created_at,
        "user": {
            "screen_name": author,
            "name": name if name is not None else author.title(),
            "followers": followers,
        },
        "entities": {
            "hashtags": [{"text": h} for h in hashtags],
            "mentions": [{"screen_name": m} for m in mentions],
        },
    }


@pytest.fixture
def tweet():
    return make_tweet


def write_jsonl(path: Path, payloads) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in payloads:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, desc, passed in sorted(ACCEPTANCE_RESULTS):
        state = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"ACCEPTANCE CRITERION {number}: {state} - {desc}")
