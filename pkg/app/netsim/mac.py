"""Abstract contention model of the RTS-CTS-DATA-ACK handshake.

Each stage of an attempt fails independently with probability

    p_fail(k) = 1 - (1 - base_loss) * (1 - contention_loss) ** k

where k is the number of backlogged contenders within two hops of the sender.
A failed attempt costs a timeout plus exponential backoff; the handshake is
retried up to retry_limit times before the frame is given up.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.netsim.trace import ACK, CTS, DATA, RECEIVED, RTS, SENT

HEADER_BYTES = {RTS: 20, CTS: 14, ACK: 14}
MAC_DATA_OVERHEAD = 34


@dataclass(frozen=True)
class MacParams:
    bitrate: float = 2_000_000.0
    preamble: float = 192e-6
    sifs: float = 10e-6
    difs: float = 50e-6
    slot: float = 20e-6
    contention_window: int = 31
    base_loss: float = 0.001
    contention_loss: float = 0.01
    retry_limit: int = 4
    backoff_base: float = 0.020
    queue_capacity: int = 50
    activity_window: float = 1.0

    def frame_time(self, size_bytes: int) -> float:
        return self.preamble + size_bytes * 8 / self.bitrate


@dataclass(frozen=True)
class HandshakeStep:
    offset: float
    frame: str
    action: str
    attempt: int
    at_receiver: bool = False


@dataclass
class HandshakeOutcome:
    complete: bool
    attempts: int
    elapsed: float
    steps: List[HandshakeStep] = field(default_factory=list)

    @property
    def data_frame_offset(self) -> Optional[float]:
        """Offset of the first DATA frame on air, the moment a watchdog overhears it."""
        for step in self.steps:
            if step.frame == DATA and step.action == SENT:
                return step.offset
        return None


def stage_failure_probability(contenders: int, params: MacParams) -> float:
    return 1.0 - (1.0 - params.base_loss) * (1.0 - params.contention_loss) ** max(contenders, 0)


def completion_probability(contenders: int, params: MacParams) -> float:
    """Probability a single attempt completes all four stages."""
    return (1.0 - stage_failure_probability(contenders, params)) ** 4


def mac_handshake(
    size: int,
    contenders: int,
    rng: np.random.Generator,
    params: MacParams = MacParams(),
    receiver_alive: bool = True,
    force_failure: bool = False,
) -> HandshakeOutcome:
    """Plan one frame's handshake; offsets are relative to the moment the sender starts."""
    p_fail = 1.0 if force_failure or not receiver_alive else stage_failure_probability(contenders, params)
    stages = [
        (RTS, params.frame_time(HEADER_BYTES[RTS]), False),
        (CTS, params.frame_time(HEADER_BYTES[CTS]), True),
        (DATA, params.frame_time(size + MAC_DATA_OVERHEAD), False),
        (ACK, params.frame_time(HEADER_BYTES[ACK]), True),
    ]
    steps: List[HandshakeStep] = []
    clock = 0.0
    for attempt in range(params.retry_limit + 1):
        clock += params.difs + int(rng.integers(0, params.contention_window + 1)) * params.slot
        failed = False
        for frame, duration, from_receiver in stages:
            if frame != RTS:
                clock += params.sifs
            if rng.random() < p_fail:
                # The frame is lost on air; the sender waits out the response timeout
                if not from_receiver:
                    steps.append(HandshakeStep(clock, frame, SENT, attempt))
                clock += duration + params.sifs
                failed = True
                break
            if from_receiver:
                clock += duration
                steps.append(HandshakeStep(clock, frame, RECEIVED, attempt))
            else:
                steps.append(HandshakeStep(clock, frame, SENT, attempt))
                clock += duration
        if not failed:
            steps.append(HandshakeStep(clock, DATA, RECEIVED, attempt, at_receiver=True))
            return HandshakeOutcome(True, attempt + 1, clock, steps)
        if attempt < params.retry_limit:
            clock += params.backoff_base * (2 ** attempt) * rng.random()
    return HandshakeOutcome(False, params.retry_limit + 1, clock, steps)
