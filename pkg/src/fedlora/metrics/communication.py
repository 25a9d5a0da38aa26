"""Exact per-round communication accounting.

Entry counts per client per layer, both directions, as a function of the
strategy (k x d frozen weight, rank r adapters, U clients):

    strategy   client -> server      server -> client
    IDEAL      k*r + r*d             k*d          (dense delta broadcast)
    FEDIT      k*r + r*d             k*r + r*d
    FFA        k*r                   k*r          (A never moves)
    FEDSA      r*d                   r*d          (B never moves)
    STACK      k*r + r*d             (k + d) * sum_u r_u
    FEDEX      k*r + r*d             k*r + r*d + k*d   (adds the residual)
    FLORA_NA   k*r + r*d             k*r + r*d

Bytes are entries * bits / 8 at the declared precision. The ledger keeps raw
per-(round, client, direction) entries and running totals, and checks that
the totals always equal the sum of the parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..aggregation import Strategy

_VALID_BITS = (8, 16, 32, 64)


@dataclass(frozen=True)
class LayerShape:
    out_dim: int  # k
    in_dim: int  # d
    rank: int  # r of the shared template


@dataclass(frozen=True)
class ClientTraffic:
    """Entries and bytes moved by one client in one round, both directions."""

    up_entries: int
    down_entries: int
    up_bytes: int
    down_bytes: int


def _bytes(entries: int, precision_bits: int) -> int:
    if precision_bits not in _VALID_BITS:
        raise ValueError(f"precision must be one of {_VALID_BITS}, got {precision_bits}")
    return entries * precision_bits // 8


def comm_account(
    strategy: Strategy,
    shapes: list[LayerShape],
    num_clients: int,
    precision_bits: int = 32,
    client_ranks: list[int] | None = None,
) -> ClientTraffic:
    """Traffic for one client in one round, summed over layers.

    client_ranks supplies the per-client ranks for STACK downloads when they
    differ; by default every client is assumed to use the template rank.
    """
    up = 0
    down = 0
    for shape in shapes:
        k, d, r = shape.out_dim, shape.in_dim, shape.rank
        pair = k * r + r * d
        if strategy is Strategy.IDEAL:
            up += pair
            down += k * d
        elif strategy in (Strategy.FEDIT, Strategy.FLORA_NA):
            up += pair
            down += pair
        elif strategy is Strategy.FFA:
            up += k * r
            down += k * r
        elif strategy is Strategy.FEDSA:
            up += r * d
            down += r * d
        elif strategy is Strategy.STACK:
            ranks = client_ranks if client_ranks is not None else [r] * num_clients
            up += pair
            down += (k + d) * sum(ranks)
        elif strategy is Strategy.FEDEX:
            up += pair
            down += pair + k * d
        else:
            raise ValueError(f"unhandled strategy {strategy}")
    return ClientTraffic(
        up_entries=up,
        down_entries=down,
        up_bytes=_bytes(up, precision_bits),
        down_bytes=_bytes(down, precision_bits),
    )


@dataclass(frozen=True)
class CommRecord:
    round_index: int
    client_id: str
    direction: str  # "up" or "down"
    entries: int
    bytes: int


@dataclass
class CommLedger:
    """Accumulates per-round per-client records plus running totals."""

    records: list[CommRecord] = field(default_factory=list)
    total_entries: int = 0
    total_bytes: int = 0

    def record(self, round_index: int, client_id: str, traffic: ClientTraffic) -> None:
        self.records.append(
            CommRecord(round_index, client_id, "up", traffic.up_entries, traffic.up_bytes)
        )
        self.records.append(
            CommRecord(
                round_index, client_id, "down", traffic.down_entries, traffic.down_bytes
            )
        )
        self.total_entries += traffic.up_entries + traffic.down_entries
        self.total_bytes += traffic.up_bytes + traffic.down_bytes

    def consistent(self) -> bool:
        return self.total_entries == sum(r.entries for r in self.records) and (
            self.total_bytes == sum(r.bytes for r in self.records)
        )

    def round_totals(self, round_index: int) -> tuple[int, int]:
        """(entries, bytes) moved in one round, both directions."""
        recs = [r for r in self.records if r.round_index == round_index]
        return sum(r.entries for r in recs), sum(r.bytes for r in recs)
