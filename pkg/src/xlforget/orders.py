"""Language order policies for sequential training."""

from __future__ import annotations

import json
from enum import Enum
from importlib import resources
from typing import Mapping, Sequence

from .numeric import Rng
from .regimes import LanguageOrder
from .tasks import HIGH, LOW, MID, UNASSIGNED, TaskDataset

# Resource weight of a synthetic language = train size x vitality multiplier.
VITALITY_MULTIPLIER = {HIGH: 3.0, MID: 2.0, LOW: 1.0, UNASSIGNED: 1.0}


class OrderPolicy(str, Enum):
    RESOURCE_RANKED = "resource_ranked"
    SHUFFLED = "shuffled"
    DESTRUCTIVE_LAST = "destructive_last"


def resource_weights(datasets: Mapping[str, TaskDataset]) -> dict[str, float]:
    return {l: len(ds.train) * VITALITY_MULTIPLIER[ds.spec.vitality] for l, ds in datasets.items()}


def resource_ranked(weights: Mapping[str, float]) -> list[str]:
    """Heaviest first; ties broken by language id."""
    return sorted(weights, key=lambda l: (-weights[l], l))


def shuffled(languages: Sequence[str], seed: int, index: int = 0) -> list[str]:
    langs = sorted(languages)
    perm = Rng(seed).fork("order", index).permutation(len(langs))
    return [langs[i] for i in perm]


def destructive_last(languages: Sequence[str], destructive: Sequence[str], seed: int, index: int = 0) -> list[str]:
    """A shuffled order whose suffix is a shuffled permutation of ``destructive``."""
    bad = set(destructive) - set(languages)
    if bad:
        raise ValueError(f"destructive languages not in the language set: {sorted(bad)}")
    rest = [l for l in languages if l not in set(destructive)]
    return shuffled(rest, seed, index) + shuffled(list(destructive), seed, index + 10_000)


def make_orders(
    policy: OrderPolicy | str,
    languages: Sequence[str],
    N: int,
    seed: int = 0,
    weights: Mapping[str, float] | None = None,
    destructive: Sequence[str] = (),
) -> list[LanguageOrder]:
    """N orders under a single policy; order ids are "1".."N"."""
    if not languages:
        raise ValueError("no languages")
    if N < 1:
        raise ValueError("N must be >= 1")
    policy = OrderPolicy(policy) if not isinstance(policy, OrderPolicy) else policy
    out = []
    for n in range(N):
        if policy is OrderPolicy.RESOURCE_RANKED:
            if weights is None:
                raise ValueError("resource ranking needs weights")
            langs = resource_ranked({l: weights[l] for l in languages})
        elif policy is OrderPolicy.SHUFFLED:
            langs = shuffled(languages, seed, n)
        else:
            langs = destructive_last(languages, destructive, seed, n)
        out.append(LanguageOrder(str(n + 1), tuple(langs)))
    return out


def mixed_orders(
    languages: Sequence[str],
    N: int,
    seed: int,
    weights: Mapping[str, float],
    destructive: Sequence[str] = (),
) -> list[LanguageOrder]:
    """Order 1 resource-ranked, the middle ones shuffled, the last destructive-last when a set is given."""
    if N < 1:
        raise ValueError("N must be >= 1")
    orders = [LanguageOrder("1", tuple(resource_ranked({l: weights[l] for l in languages})))]
    for n in range(1, N):
        if n == N - 1 and destructive:
            langs = destructive_last(languages, destructive, seed, n)
        else:
            langs = shuffled(languages, seed, n)
        orders.append(LanguageOrder(str(n + 1), tuple(langs)))
    return orders


def massive_orders() -> list[LanguageOrder]:
    """The five published 52-locale MASSIVE orders, bundled verbatim."""
    text = resources.files("xlforget").joinpath("data/massive_orders.json").read_text()
    data = json.loads(text)["orders"]
    return [LanguageOrder(k, tuple(v)) for k, v in sorted(data.items(), key=lambda kv: int(kv[0]))]


def restrict(order: LanguageOrder, languages: Sequence[str]) -> LanguageOrder:
    """Keep the relative order of ``languages`` inside a longer order."""
    keep = set(languages)
    missing = keep - set(order.langs)
    if missing:
        raise ValueError(f"order {order.order_id} lacks {sorted(missing)}")
    return LanguageOrder(order.order_id, tuple(l for l in order.langs if l in keep))
