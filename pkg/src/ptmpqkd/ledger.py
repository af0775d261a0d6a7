"""
Per-Bob secret-key bookkeeping for one-time-pad encrypted syndromes.

Every round Bob pays L_s pad bits to encrypt his syndrome. A successful
round distils pulses * (beta I - bound) + L_s fresh bits, so the pad is
repaid. A failed round distils nothing; with recycling, the spent pad is
privacy-amplified down to L_s - pulses * chi bits, since Eve's information
on it cannot exceed her Holevo information on Bob's data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, InsufficientBalance
from .keyrate import KeyRateBreakdown


@dataclass(frozen=True)
class RoundRecord:
    bob: int
    pulses: int
    syndrome_len: int
    success: bool
    generated: int
    recycled: int
    net: int


@dataclass
class KeyLedger:
    recycling: bool = True
    balances: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def balance(self, bob: int) -> int:
        return self.balances.get(bob, 0)

    def bootstrap(self, bob: int, bits: int) -> None:
        """Deposit pre-shared key, e.g. from a key pool or a one-way session."""
        if bits < 0:
            raise DomainError("bootstrap deposit must be non-negative")
        self.balances[bob] = self.balance(bob) + int(bits)

    def round(self, bob: int, pulses: int, k: KeyRateBreakdown, syndrome_len: int,
              success: bool) -> RoundRecord:
        if pulses < 1:
            raise DomainError("a round needs at least one pulse")
        if syndrome_len < 0:
            raise DomainError("syndrome length must be non-negative")
        syndrome_len = int(syndrome_len)
        before = self.balance(bob)
        if before < syndrome_len:
            raise InsufficientBalance(
                f"Bob {bob} holds {before} bits but the syndrome needs {syndrome_len}; "
                "accumulate key in advance")
        bound = max(k.I_BB_max, k.chi_BE)
        if success:
            generated = max(0, math.floor(pulses * (k.beta * k.I_AB - bound)) + syndrome_len)
            recycled = 0
        else:
            generated = 0
            leaked = math.ceil(pulses * k.chi_BE)
            recycled = max(0, syndrome_len - leaked) if self.recycling else 0
        net = generated + recycled - syndrome_len
        self.balances[bob] = before + net
        rec = RoundRecord(bob, pulses, syndrome_len, success, generated, recycled, net)
        self.records.append(rec)
        return rec


def ledger_round(ledger: KeyLedger, bob: int, pulses: int, k: KeyRateBreakdown,
                 syndrome_len: int, success: bool) -> KeyLedger:
    ledger.round(bob, pulses, k, syndrome_len, success)
    return ledger


@dataclass(frozen=True)
class LedgerStats:
    rounds: int
    pulses: int
    mean_net_per_pulse: float
    standard_error: float
    failures: int
    topups: int = 0


def simulate_ledger(k: KeyRateBreakdown, pulses: int, rounds: int, syndrome_len: int,
                    seed: int, *, recycling: bool = True, bob: int = 1,
                    ledger: Optional[KeyLedger] = None) -> LedgerStats:
    """Run ``rounds`` rounds with failures drawn at rate k.p_f."""
    ledger = ledger or KeyLedger(recycling=recycling)
    rng = np.random.Generator(np.random.Philox(seed))
    fails = rng.random(rounds) < k.p_f
    nets = np.empty(rounds)
    topups = 0
    for r in range(rounds):
        # runs of failures can drain the pad; refill from the pre-shared pool
        if ledger.balance(bob) < syndrome_len:
            ledger.bootstrap(bob, syndrome_len - ledger.balance(bob))
            topups += 1
        nets[r] = ledger.round(bob, pulses, k, syndrome_len, not fails[r]).net / pulses
    return LedgerStats(rounds, pulses, float(nets.mean()),
                       float(nets.std(ddof=1) / math.sqrt(rounds)) if rounds > 1 else float("nan"),
                       int(fails.sum()), topups)
