"""Discriminator-guided Monte-Carlo tree search decoding.

One tree is grown from scratch for every emitted token.  A round descends
from the root by PUCT until it reaches a node without a value, expands it
over the generator's nucleus (unless terminal), sets its value to the
discriminator score of the unfinished prefix (no rollouts), and pushes that
score up the path with ``max``.

Visit accounting: every traversal through a node counts, including the
round that creates its value.  The root is expanded and valued before the
first round and that counts as one visit, so after ``rounds`` rounds the
root has ``rounds + 1`` visits and its children ``rounds`` between them;
every expanded non-root node has ``1 + sum(children)`` visits.

Because selection, expansion and evaluation are deterministic, the visit
distribution at a root depends only on the root prefix.  ``VisitPolicy``
caches it per prefix, which makes the visit-proportional sampler a proper
distribution over the whole space with an exact density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import PrefixDiscriminator, TabularGenerator, disc_score
from .nucleus import nucleus_set
from .seqspace import Sequence, sample_indices

MODES = ("conditional", "unconditional")


class StaleDecodeError(ValueError):
    """A decode output was queried for a different context or seed."""


@dataclass(frozen=True)
class MctsConfig:
    c_puct: float = 1.0
    rounds: int = 50
    sigma: float = 0.1
    mode: str = "conditional"

    def __post_init__(self):
        if self.c_puct < 0:
            raise ValueError("c_puct must be non-negative")
        if self.rounds < 1:
            raise ValueError("MCTS needs at least one round")
        if not 0 < self.sigma <= 1:
            raise ValueError("sigma must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(eq=False)
class MctsNode:
    prefix: Sequence
    prior: float
    terminal: bool
    visit_count: int = 0
    value: float = 0.0
    evaluated: bool = False
    children: dict[int, "MctsNode"] = field(default_factory=dict)


def puct_score(child: MctsNode, parent_visits: int, c_puct: float) -> float:
    return child.value + c_puct * child.prior * math.sqrt(parent_visits / (1 + child.visit_count))


def select_child(node: MctsNode, c_puct: float) -> MctsNode:
    """PUCT argmax over the children; the lowest token id wins ties."""
    best, best_score = None, -math.inf
    for tok in sorted(node.children):
        child = node.children[tok]
        score = puct_score(child, node.visit_count, c_puct)
        if score > best_score:
            best, best_score = child, score
    return best


class _Search:
    def __init__(self, gen: TabularGenerator, disc: PrefixDiscriminator, ctx: int, cfg: MctsConfig):
        self.gen, self.disc, self.ctx, self.cfg = gen, disc, ctx, cfg
        self.space = gen.space

    def expand_and_evaluate(self, node: MctsNode) -> float:
        if not node.terminal:
            probs = self.gen.step_probs(self.ctx, node.prefix)
            for tok in nucleus_set(probs, self.cfg.sigma):
                child = node.prefix + (tok,)
                node.children[tok] = MctsNode(child, float(probs[tok]), self.space.is_terminal(child))
        score = disc_score(self.disc, self.ctx, node.prefix)
        node.value = score
        node.evaluated = True
        return score

    def run(self, root_prefix: Sequence) -> MctsNode:
        root = MctsNode(tuple(root_prefix), 1.0, self.space.is_terminal(root_prefix))
        if root.terminal:
            raise ValueError(f"cannot search from terminal prefix {root.prefix}")
        root.visit_count = 1
        self.expand_and_evaluate(root)
        for _ in range(self.cfg.rounds):
            node, path = root, [root]
            node.visit_count += 1
            while node.evaluated and node.children:
                node = select_child(node, self.cfg.c_puct)
                node.visit_count += 1
                path.append(node)
            score = self.expand_and_evaluate(node)
            for anc in path[:-1]:
                anc.value = max(anc.value, score)
        return root


def search(gen, disc, ctx: int, root_prefix: Sequence, cfg: MctsConfig) -> MctsNode:
    """Grow one tree of ``cfg.rounds`` rounds from ``root_prefix``."""
    gen.space.check_context(ctx)
    return _Search(gen, disc, ctx, cfg).run(tuple(root_prefix))


def root_visit_dist(root: MctsNode, n_symbols: int) -> np.ndarray:
    counts = np.zeros(n_symbols)
    for tok, child in root.children.items():
        counts[tok] = child.visit_count
    return counts / counts.sum()


def most_visited(root: MctsNode) -> int:
    return max(sorted(root.children), key=lambda t: root.children[t].visit_count)


class VisitPolicy:
    """Per-prefix root visit distributions for one (generator, discriminator, context)."""

    def __init__(self, gen, disc, ctx: int, cfg: MctsConfig):
        self.gen, self.disc, self.ctx, self.cfg = gen, disc, ctx, cfg
        self.trees: dict[Sequence, MctsNode] = {}
        self._dists: dict[Sequence, np.ndarray] = {}

    def tree(self, prefix: Sequence) -> MctsNode:
        prefix = tuple(prefix)
        if prefix not in self.trees:
            self.trees[prefix] = search(self.gen, self.disc, self.ctx, prefix, self.cfg)
        return self.trees[prefix]

    def dist(self, prefix: Sequence) -> np.ndarray:
        prefix = tuple(prefix)
        if prefix not in self._dists:
            self._dists[prefix] = root_visit_dist(self.tree(prefix), self.gen.space.vocab.n_symbols)
        return self._dists[prefix]

    def sequence_prob(self, y: Sequence) -> float:
        p = 1.0
        for j, tok in enumerate(y):
            p *= float(self.dist(y[:j])[tok])
            if p == 0.0:
                break
        return p


@dataclass
class DecodeOutput:
    ctx: int
    seed: int | None
    mode: str
    sequence: Sequence
    visit_dists: list[np.ndarray]
    policy: VisitPolicy

    def check(self, ctx: int, seed: int | None = None) -> None:
        if ctx != self.ctx or (seed is not None and seed != self.seed):
            raise StaleDecodeError(
                f"decode made for context {self.ctx}, seed {self.seed}; "
                f"queried with context {ctx}, seed {seed}"
            )

    def guided_prob(self, y: Sequence) -> float:
        """Density of ``y`` under the search-only sampler."""
        if self.mode == "conditional":
            return 1.0 if tuple(y) == self.sequence else 0.0
        return self.policy.sequence_prob(tuple(y))


def mcts_decode(
    gen: TabularGenerator,
    disc: PrefixDiscriminator,
    ctx: int,
    cfg: MctsConfig,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    policy: VisitPolicy | None = None,
) -> DecodeOutput:
    """Decode one sequence token by token, one fresh tree per token.

    Conditional mode emits the most visited root child; unconditional mode
    samples a child in proportion to visits and needs ``rng``.
    """
    if policy is None:
        policy = VisitPolicy(gen, disc, ctx, cfg)
    if cfg.mode == "unconditional" and rng is None:
        raise ValueError("unconditional decoding samples root moves and needs an rng")
    space = gen.space
    y: Sequence = ()
    dists = []
    while not space.is_terminal(y):
        dist = policy.dist(y)
        dists.append(dist)
        if cfg.mode == "conditional":
            tok = most_visited(policy.tree(y))
        else:
            tok = int(sample_indices(dist, rng, 1)[0])
        y += (tok,)
    return DecodeOutput(ctx, seed, cfg.mode, y, dists, policy)


def _node_json(node: MctsNode) -> dict:
    return {
        "prefix": list(node.prefix),
        "N": node.visit_count,
        "V": node.value,
        "prior": node.prior,
        "children": {str(t): _node_json(c) for t, c in sorted(node.children.items())},
    }


def decode_trace(decode: DecodeOutput) -> dict:
    """JSON-ready trace: chosen tokens, root visit distributions and full V/N trees."""
    steps = []
    for j, dist in enumerate(decode.visit_dists):
        prefix = decode.sequence[:j]
        steps.append(
            {
                "prefix": list(prefix),
                "token": decode.sequence[j],
                "visit_dist": dist.tolist(),
                "tree": _node_json(decode.policy.tree(prefix)),
            }
        )
    return {
        "schema": "gcnlab.mcts_trace/1",
        "context": decode.ctx,
        "seed": decode.seed,
        "mode": decode.mode,
        "sequence": list(decode.sequence),
        "config": {
            "c_puct": decode.policy.cfg.c_puct,
            "rounds": decode.policy.cfg.rounds,
            "sigma": decode.policy.cfg.sigma,
        },
        "steps": steps,
    }
