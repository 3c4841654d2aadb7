"""Composite enforcement points: an in-line chain of nodes and a master/worker cluster."""

from __future__ import annotations

import hashlib
import threading
from enum import Enum
from typing import Mapping, Optional, Sequence

from soasec.core.canonical import canonicalize
from soasec.gateway.instance import GatewayInstance, ProcessResult, run_message
from soasec.gateway.message import Message
from soasec.gateway.policy import ECP, ActionType, PolicyBundle, Step


class PartitionError(ValueError):
    pass


class PartitionGap(PartitionError):
    pass


class PartitionOverlap(PartitionError):
    pass


class ClusterConfigError(ValueError):
    pass


# ecp id -> [(start, stop, node index)], half-open step ranges
Partition = Mapping[str, Sequence[tuple[int, int, int]]]


def even_partition(bundle: PolicyBundle, n_nodes: int) -> dict[str, list[tuple[int, int, int]]]:
    """Split every ECP into ``n_nodes`` contiguous ranges, as even as possible."""
    out: dict[str, list[tuple[int, int, int]]] = {}
    for ecp in bundle.ecps:
        n = len(ecp.steps)
        bounds = [round(k * n / n_nodes) for k in range(n_nodes + 1)]
        out[ecp.id] = [(bounds[k], bounds[k + 1], k) for k in range(n_nodes) if bounds[k] < bounds[k + 1]]
    return out


def _check_ranges(ecp: ECP, ranges: Sequence[tuple[int, int, int]], n_nodes: int) -> list[int]:
    owner: list[Optional[int]] = [None] * len(ecp.steps)
    for start, stop, node in ranges:
        if not 0 <= node < n_nodes:
            raise PartitionError(f"{ecp.id}: no node {node}")
        if not 0 <= start <= stop <= len(ecp.steps):
            raise PartitionError(f"{ecp.id}: range {start}..{stop} outside the ECP")
        for i in range(start, stop):
            if owner[i] is not None:
                raise PartitionOverlap(f"{ecp.id}: step {i} assigned twice")
            owner[i] = node
    for i, node in enumerate(owner):
        if node is None:
            raise PartitionGap(f"{ecp.id}: step {i} unassigned")
    resolved = [n for n in owner if n is not None]
    if resolved != sorted(resolved):
        raise PartitionError(f"{ecp.id}: ranges must follow the line order")
    return resolved


class InlineComposite:
    """Nodes in a line, each resolving a contiguous part of every ECP.

    The first node selects the ECP and holds enforcement state; the working
    message, annotations included, is handed from node to node.
    """

    def __init__(self, nodes: Sequence[GatewayInstance], partition: Partition):
        if not nodes:
            raise PartitionError("an in-line composite needs at least one node")
        self.nodes = list(nodes)
        bundle = self.nodes[0].bundle
        if bundle is None:
            raise PartitionError("the head node has no bundle")
        self._owner: dict[str, list[int]] = {}
        for ecp in bundle.ecps:
            if ecp.id not in partition:
                if ecp.steps:
                    raise PartitionGap(f"{ecp.id}: not partitioned")
                self._owner[ecp.id] = []
                continue
            self._owner[ecp.id] = _check_ranges(ecp, partition[ecp.id], len(self.nodes))
        extra = set(partition) - set(self._owner)
        if extra:
            raise PartitionError(f"partition names unknown ECPs {sorted(extra)}")

    @property
    def id(self) -> str:
        return self.nodes[0].id

    def process(self, msg: Message) -> ProcessResult:
        def placement(ecp: ECP, i: int, step: Step) -> list[GatewayInstance]:
            return [self.nodes[self._owner[ecp.id][i]]]

        return run_message(self.nodes[0], msg, placement)


class Assignment(str, Enum):
    ROUND_ROBIN = "round-robin"
    LEAST_LOADED = "least-loaded"
    AFFINITY_BY_ACTION = "affinity-by-action"


def _action_slot(action: ActionType, n: int) -> int:
    return int.from_bytes(hashlib.sha256(action.value.encode()).digest()[:4], "big") % n


class ClusterComposite:
    """A master that farms steps out to workers.

    The master selects the ECP and owns enforcement state; workers only run
    steps. An unavailable worker is skipped and the step reassigned.
    Least-loaded compares outstanding steps, then steps run so far.
    """

    def __init__(
        self,
        master: GatewayInstance,
        workers: Sequence[GatewayInstance],
        assignment: Assignment | str = Assignment.ROUND_ROBIN,
        affinity: Mapping[ActionType, int] | None = None,
    ):
        self.master = master
        self.workers = list(workers)
        self.assignment = Assignment(assignment)
        self.affinity = dict(affinity or {})
        reference = canonicalize(master.bundle.to_doc()) if master.bundle else None
        for w in self.workers:
            if w.bundle is None or canonicalize(w.bundle.to_doc()) != reference:
                raise ClusterConfigError(f"worker {w.id} does not share the master's bundle")
        self._next = 0
        self._lock = threading.Lock()

    @property
    def id(self) -> str:
        return self.master.id

    def _order(self, step: Step) -> list[GatewayInstance]:
        n = len(self.workers)
        if n == 0:
            return []
        if self.assignment is Assignment.ROUND_ROBIN:
            with self._lock:
                start = self._next
                self._next = (self._next + 1) % n
        elif self.assignment is Assignment.AFFINITY_BY_ACTION:
            start = self.affinity.get(step.action, _action_slot(step.action, n)) % n
        else:
            ranked = sorted(range(n), key=lambda k: (self.workers[k].outstanding, self.workers[k].executed, k))
            return [self.workers[k] for k in ranked]
        return [self.workers[(start + k) % n] for k in range(n)]

    def process(self, msg: Message) -> ProcessResult:
        return run_message(self.master, msg, lambda ecp, i, step: self._order(step))
