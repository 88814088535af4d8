"""System/user prompt rendering for zero-shot, identity and few-shot prompting.

Wording lives in text assets with ``{persona}``, ``{year}`` and ``{examples}``
slots; pass another directory to :class:`PromptTemplates` to change it.
"""

from __future__ import annotations

import html
import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

from narrec.corpus import CatalogEntry, Submission
from narrec.util import derive_seed

KINDS = ("zero_shot", "identity", "few_shot")
PERSONAS = ("reddit_user", "movie_critic", "movie_recommender")
SHOT_COUNTS = (1, 5, 10)
LIST_SIZE = 10


@dataclass(frozen=True)
class Strategy:
    kind: str
    persona: Optional[str] = None
    n_examples: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prompting strategy {self.kind!r}")
        if (self.persona is not None) != (self.kind == "identity"):
            raise ValueError("a persona is required for identity prompting and only there")
        if self.persona is not None and self.persona not in PERSONAS:
            raise ValueError(f"unknown persona {self.persona!r}")
        if (self.n_examples is not None) != (self.kind == "few_shot"):
            raise ValueError("n_examples is required for few-shot prompting and only there")
        if self.n_examples is not None and self.n_examples not in SHOT_COUNTS:
            raise ValueError(f"n_examples must be one of {SHOT_COUNTS}")

    @property
    def id(self) -> str:
        if self.kind == "identity":
            return f"identity:{self.persona}"
        if self.kind == "few_shot":
            return f"few_shot:{self.n_examples}"
        return "zero_shot"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "Strategy":
        """Parse ``zero_shot``, ``identity:<persona>`` or ``few_shot:<n>``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "identity":
            return cls(kind, persona=arg or None, seed=seed)
        if kind == "few_shot":
            try:
                n = int(arg)
            except ValueError:
                raise ValueError(f"few_shot needs an example count, got {text!r}") from None
            return cls(kind, n_examples=n, seed=seed)
        if arg:
            raise ValueError(f"zero_shot takes no argument, got {text!r}")
        return cls(kind, seed=seed)


@dataclass(frozen=True)
class PromptBundle:
    strategy: Strategy
    submission_id: str
    system_text: str
    user_text: str
    cutoff_year: int


@dataclass(frozen=True)
class ExampleSource:
    """One training request with the ten-movie answer shown as its few-shot output."""
    submission: Submission
    recommendations: tuple[str, ...]


class PromptTemplates:
    def __init__(self, directory: str | Path | None = None):
        if directory is None:
            root = resources.files("narrec") / "assets"
            read = lambda name: (root / name).read_text(encoding="utf-8")
        else:
            directory = Path(directory)
            read = lambda name: (directory / name).read_text(encoding="utf-8")
        self.task = read("task.txt").strip()
        self.persona = read("persona.txt").strip()
        self.examples = read("examples.txt").strip()
        self.example_pair = read("example_pair.txt").strip()
        self.personas: dict[str, str] = json.loads(read("personas.json"))

    def task_text(self, cutoff_year: int) -> str:
        return self.task.replace("{year}", str(cutoff_year))

    def cutoff_pattern(self) -> re.Pattern:
        head, _, tail = self.task.partition("{year}")
        return re.compile(re.escape(head) + r"(\d{4})" + re.escape(tail))


_default_templates: Optional[PromptTemplates] = None


def default_templates() -> PromptTemplates:
    global _default_templates
    if _default_templates is None:
        _default_templates = PromptTemplates()
    return _default_templates


def _escape(text: str) -> str:
    return html.escape(text, quote=False)


def build_user_prompt(submission: Submission) -> str:
    """Title and body inside tags; '&', '<' and '>' in the text are entity-escaped."""
    return f"<title>{_escape(submission.title)}</title>\n<text>{_escape(submission.body)}</text>"


_USER_RE = re.compile(r"\A<title>(.*)</title>\n<text>(.*)</text>\Z", re.DOTALL)


def parse_user_prompt(user_text: str) -> tuple[str, str]:
    m = _USER_RE.match(user_text)
    if not m:
        raise ValueError("not a rendered user prompt")
    return html.unescape(m.group(1)), html.unescape(m.group(2))


def example_output(recommendations: Sequence[str]) -> str:
    return json.dumps({"recommendations": list(recommendations)}, ensure_ascii=False)


def sample_examples(train_pool: Sequence[ExampleSource], k: int, seed: int) -> list[tuple[str, str]]:
    """k distinct (user_text, json_response_text) pairs drawn without replacement."""
    if k > len(train_pool):
        raise ValueError(f"example pool has {len(train_pool)} entries, {k} requested")
    picks = random.Random(seed).sample(range(len(train_pool)), k)
    return [(build_user_prompt(train_pool[i].submission), example_output(train_pool[i].recommendations))
            for i in picks]


def build_system_prompt(strategy: Strategy, cutoff_year: int,
                        examples: Sequence[tuple[str, str]] = (),
                        templates: Optional[PromptTemplates] = None) -> str:
    t = templates or default_templates()
    task = t.task_text(cutoff_year)
    if strategy.kind == "zero_shot":
        return task
    if strategy.kind == "identity":
        persona = t.persona.replace("{persona}", t.personas[strategy.persona])
        return persona + "\n\n" + task
    if len(examples) != strategy.n_examples:
        raise ValueError(f"few_shot:{strategy.n_examples} needs exactly {strategy.n_examples} examples, "
                         f"got {len(examples)}")
    pairs = [t.example_pair.replace("{n}", str(i)).replace("{input}", inp).replace("{output}", out)
             for i, (inp, out) in enumerate(examples, start=1)]
    return task + "\n\n" + t.examples.replace("{examples}", "\n\n".join(pairs))


def render_bundle(strategy: Strategy, submission: Submission,
                  example_pool: Sequence[ExampleSource] = (), repetition: int = 0,
                  templates: Optional[PromptTemplates] = None) -> PromptBundle:
    """Render one request. Few-shot examples are re-drawn per (submission, repetition)."""
    cutoff = submission.year
    examples: list[tuple[str, str]] = []
    if strategy.kind == "few_shot":
        seed = derive_seed(strategy.seed, submission.id, repetition)
        examples = sample_examples(example_pool, strategy.n_examples, seed)
    system_text = build_system_prompt(strategy, cutoff, examples, templates)
    return PromptBundle(strategy, submission.id, system_text, build_user_prompt(submission), cutoff)


def cutoff_year_of(system_text: str, templates: Optional[PromptTemplates] = None) -> int:
    """Recover the cutoff year embedded in a rendered system prompt."""
    m = (templates or default_templates()).cutoff_pattern().search(system_text)
    if not m:
        raise ValueError("system prompt does not contain the task section")
    return int(m.group(1))


def build_example_pool(submissions: Sequence[Submission], golds: Mapping[str, "object"],
                       catalog: Mapping[str, CatalogEntry], seed: int = 0,
                       exclude_ids: frozenset[str] = frozenset()) -> list[ExampleSource]:
    """Few-shot example pool from training requests and their gold sets.

    ``golds`` maps submission id to a GoldSet (or any set of movie ids). Each
    example shows ten gold movies in catalog "title (year)" form; requests with
    fewer than ten resolvable gold movies are skipped.
    """
    pool = []
    for sub in submissions:
        if sub.id in exclude_ids or sub.id not in golds:
            continue
        items = sorted(m for m in getattr(golds[sub.id], "items", golds[sub.id]) if m in catalog)
        if len(items) < LIST_SIZE:
            continue
        chosen = random.Random(derive_seed(seed, sub.id)).sample(items, LIST_SIZE)
        recs = tuple(f"{catalog[m].aliases[0]} ({catalog[m].release_year})" for m in chosen)
        pool.append(ExampleSource(sub, recs))
    return pool
