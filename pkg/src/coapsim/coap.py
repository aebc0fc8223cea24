"""CoAP message model shared by nodes and proxy.

Covers message types and codes, a byte-exact codec for the fixed header plus
the three options the domain uses (ETag, Observe, Max-Age), confirmable
retransmission timing, message-id lifetime bookkeeping, and the token table
that pairs multicast GET requests with their (possibly very late) replies.

Inside the simulator, messages travel as objects; the codec exists so the
wire layout stays honest and testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

from .engine import ticks_from_s

COAP_VERSION = 1

OPTION_ETAG = 4
OPTION_OBSERVE = 6
OPTION_MAX_AGE = 14


class MType(IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


class Code(IntEnum):
    EMPTY = 0
    GET = 1
    POST = 2
    PUT = 3
    DELETE = 4
    CREATED = (2 << 5) | 1      # 2.01
    CONTENT = (2 << 5) | 5      # 2.05
    NOT_FOUND = (4 << 5) | 4    # 4.04


@dataclass
class CoapMessage:
    mtype: MType
    code: Code
    message_id: int
    token: bytes = b""
    observe_seq: int | None = None
    max_age_s: int | None = None
    etag: bytes | None = None
    payload_len: int = 0
    # simulation-side routing/annotation, never encoded on the wire
    resource_id: int | None = None
    leisure_hold: int = 0

    def __post_init__(self):
        if not 0 <= self.message_id <= 0xFFFF:
            raise ValueError("message_id must fit 16 bits")
        if len(self.token) > 8:
            raise ValueError(f"token must be at most 8 bytes, got {len(self.token)}")


class CodecError(ValueError):
    pass


def _uint_bytes(value: int) -> bytes:
    if value == 0:
        return b""
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


def encode_message(msg: CoapMessage) -> bytes:
    """Encode header, token, supported options and a zero-filled payload."""
    if len(msg.token) > 8:
        raise CodecError("token longer than 8 bytes")
    out = bytearray()
    out.append((COAP_VERSION << 6) | (int(msg.mtype) << 4) | len(msg.token))
    out.append(int(msg.code))
    out += msg.message_id.to_bytes(2, "big")
    out += msg.token

    options: list[tuple[int, bytes]] = []
    if msg.etag is not None:
        if not 1 <= len(msg.etag) <= 8:
            raise CodecError("etag must be 1..8 bytes")
        options.append((OPTION_ETAG, msg.etag))
    if msg.observe_seq is not None:
        if not 0 <= msg.observe_seq < (1 << 24):
            raise CodecError("observe sequence must fit 24 bits")
        options.append((OPTION_OBSERVE, _uint_bytes(msg.observe_seq)))
    if msg.max_age_s is not None:
        if not 0 <= msg.max_age_s < (1 << 32):
            raise CodecError("max-age must fit 32 bits")
        options.append((OPTION_MAX_AGE, _uint_bytes(msg.max_age_s)))

    previous = 0
    for number, value in options:
        delta = number - previous
        previous = number
        # deltas and lengths here never reach the 13/14 extended forms
        out.append((delta << 4) | len(value))
        out += value

    if msg.payload_len > 0:
        out.append(0xFF)
        out += bytes(msg.payload_len)
    return bytes(out)


def decode_message(data: bytes) -> CoapMessage:
    """Inverse of encode_message; rejects unsupported options."""
    if len(data) < 4:
        raise CodecError("message shorter than the fixed header")
    version = data[0] >> 6
    if version != COAP_VERSION:
        raise CodecError(f"unsupported version {version}")
    mtype = MType((data[0] >> 4) & 0x3)
    tkl = data[0] & 0x0F
    if tkl > 8:
        raise CodecError("token length field exceeds 8")
    code = Code(data[1])
    message_id = int.from_bytes(data[2:4], "big")
    pos = 4
    if len(data) < pos + tkl:
        raise CodecError("truncated token")
    token = data[pos:pos + tkl]
    pos += tkl

    observe_seq = max_age_s = None
    etag = None
    number = 0
    while pos < len(data) and data[pos] != 0xFF:
        delta = data[pos] >> 4
        length = data[pos] & 0x0F
        if delta >= 13 or length >= 13:
            raise CodecError("extended option encoding not supported")
        pos += 1
        number += delta
        value = data[pos:pos + length]
        if len(value) != length:
            raise CodecError("truncated option value")
        pos += length
        if number == OPTION_ETAG:
            etag = value
        elif number == OPTION_OBSERVE:
            observe_seq = int.from_bytes(value, "big")
        elif number == OPTION_MAX_AGE:
            max_age_s = int.from_bytes(value, "big")
        else:
            raise CodecError(f"unsupported option {number}")

    payload_len = 0
    if pos < len(data):
        pos += 1  # payload marker
        payload_len = len(data) - pos

    return CoapMessage(mtype=mtype, code=code, message_id=message_id, token=token,
                       observe_seq=observe_seq, max_age_s=max_age_s, etag=etag,
                       payload_len=payload_len)


@dataclass(frozen=True)
class TransmissionParams:
    """Confirmable-transfer delay constants (seconds)."""

    ack_timeout: float = 2.0
    ack_random_factor: float = 1.5
    max_retransmit: int = 4
    default_leisure: float = 5.0
    max_transmit_span: float = 45.0
    processing_delay: float = 2.0
    max_rtt: float = 202.0

    def __post_init__(self):
        span = self.ack_timeout * self.ack_random_factor * ((1 << self.max_retransmit) - 1)
        if not math.isclose(span, self.max_transmit_span, rel_tol=1e-9):
            raise ValueError(
                f"inconsistent timing: ack_timeout*factor*(2^max_retransmit-1) = {span} "
                f"!= max_transmit_span {self.max_transmit_span}")


def retransmission_schedule(params: TransmissionParams, rng) -> list[int]:
    """Tick offsets between successive transmissions of one confirmable message.

    The initial timeout is uniform on [ack_timeout, ack_timeout * factor] and
    doubles for each of the max_retransmit retransmissions; the sender gives
    up after the last listed offset elapses unacknowledged.
    """
    u = rng.uniform01()
    first = params.ack_timeout * (1.0 + u * (params.ack_random_factor - 1.0))
    return [ticks_from_s(first) << i for i in range(params.max_retransmit)]


class MessageIdExhausted(RuntimeError):
    """All 2^16 message ids are inside their lifetime window."""


class MessageIdAllocator:
    """Sequential mod-2^16 message-id source that skips ids still alive."""

    def __init__(self, lifetime_ticks: int):
        self.lifetime = lifetime_ticks
        self._next = 0
        self._issued_at: dict[int, int] = {}

    def allocate(self, now: int) -> int:
        for _ in range(1 << 16):
            candidate = self._next
            self._next = (self._next + 1) & 0xFFFF
            issued = self._issued_at.get(candidate)
            if issued is None or now - issued >= self.lifetime:
                self._issued_at[candidate] = now
                return candidate
        raise MessageIdExhausted("no message id outside its lifetime window")


class DuplicateDetector:
    """Remembers (source, message_id) pairs for one lifetime window."""

    def __init__(self, lifetime_ticks: int):
        self.lifetime = lifetime_ticks
        self._seen: dict[tuple[int, int], int] = {}

    def is_duplicate(self, src: int, message_id: int, now: int) -> bool:
        key = (src, message_id)
        seen = self._seen.get(key)
        if seen is not None and now - seen < self.lifetime:
            return True
        self._seen[key] = now
        if len(self._seen) > 4096:
            horizon = now - self.lifetime
            self._seen = {k: t for k, t in self._seen.items() if t >= horizon}
        return False


def token_release_count(leisure_max_ticks: int, min_mget_gap_ticks: int,
                        epsilon: float) -> int:
    """Number m of subsequent multicast requests after which a token is recycled.

    Chosen so the probability that a reply to request k arrives after request
    k+m has been issued stays below epsilon.  Leisure distributions here have
    bounded support, so the conservative count is ceil(leisure_max / min_gap),
    never less than 1.
    """
    if min_mget_gap_ticks <= 0:
        raise ValueError("min_mget_gap must be positive")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    if leisure_max_ticks < 0:
        raise ValueError("leisure_max must be >= 0")
    return max(1, math.ceil(leisure_max_ticks / min_mget_gap_ticks))


@dataclass
class TokenEntry:
    token: bytes
    issued_at: int
    mget_seq: int


class TokenTable:
    """Outstanding multicast-GET tokens with count-based release."""

    def __init__(self, release_after: int):
        if release_after < 1:
            raise ValueError("release_after must be >= 1")
        self.release_after = release_after
        self._entries: dict[bytes, TokenEntry] = {}
        self._seq = 0
        self.unmatched = 0

    @property
    def current_seq(self) -> int:
        return self._seq

    def issue(self, token: bytes, now: int) -> TokenEntry:
        """Record the token of a new multicast GET; recycle expired ones."""
        self._seq += 1
        entry = TokenEntry(token, now, self._seq)
        self._entries[token] = entry
        floor = self._seq - self.release_after
        if floor > 0:
            self._entries = {t: e for t, e in self._entries.items() if e.mget_seq > floor}
        return entry

    def match(self, token: bytes) -> TokenEntry | None:
        """Match a reply token; a released or unknown token counts as unmatched."""
        entry = self._entries.get(token)
        if entry is None:
            self.unmatched += 1
        return entry


def token_from_counter(counter: int) -> bytes:
    return (counter & 0xFFFFFFFF).to_bytes(4, "big")
