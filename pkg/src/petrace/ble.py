"""BLE advertising codec for 32-byte EBIDs.

The EBID does not fit in one legacy advertising packet, so it is split into
two 16-byte halves. Two carriers are supported:

* scan-response mode: ``ADV_IND`` carries the low half under service
  0xFD01 and ``SCAN_RSP`` carries the high half under service 0xFD02;
* fragmentation mode: consecutive ``ADV_IND`` packets under 0xFD01
  alternate between the halves, with bit 0 of the first reserved byte
  telling which half is carried.

Byte layouts are documented in ``docs/ble_layout.md``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

UUID_PNS1 = 0xFD01
UUID_PNS2 = 0xFD02
HALF_SIZE = 16
ADV_SIZE = 29
SCAN_RSP_SIZE = 24

FLAGS_BLOCK = bytes([0x02, 0x01, 0x06])  # LE General Discoverable, BR/EDR not supported
AD_COMPLETE_UUID16 = 0x03
AD_SERVICE_DATA16 = 0x16

LOW, HIGH = 0, 1


class CodecError(ValueError):
    pass


class Malformed(CodecError):
    pass


class NotOurService(CodecError):
    pass


def _uuid_block(uuid: int) -> bytes:
    return bytes([0x03, AD_COMPLETE_UUID16]) + uuid.to_bytes(2, "little")


def segment_ebid(ebid: bytes) -> tuple[bytes, bytes]:
    """Split into ``(id_l, id_h)``: last and first 16 bytes respectively."""
    if len(ebid) != 2 * HALF_SIZE:
        raise Malformed(f"EBID must be 32 bytes, got {len(ebid)}")
    return ebid[HALF_SIZE:], ebid[:HALF_SIZE]


def reassemble(id_l: bytes, id_h: bytes) -> bytes:
    if len(id_l) != HALF_SIZE or len(id_h) != HALF_SIZE:
        raise Malformed("halves must be 16 bytes each")
    return id_h + id_l


def _check_byte(name: str, value: int) -> None:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"{name} must fit in one byte, got {value}")


def build_adv(id_l: bytes, version: int = 1, tx_gain: int = 0, fragment: int = 0) -> bytes:
    if len(id_l) != HALF_SIZE:
        raise Malformed("ID half must be 16 bytes")
    _check_byte("version", version)
    _check_byte("tx_gain", tx_gain)
    if fragment not in (0, 1):
        raise ValueError("fragment index is a single bit")
    service = (UUID_PNS1.to_bytes(2, "little") + id_l
               + bytes([version, tx_gain, fragment, 0x00]))
    payload = FLAGS_BLOCK + _uuid_block(UUID_PNS1) + service
    assert len(payload) == ADV_SIZE
    return payload


def build_scan_rsp(id_h: bytes) -> bytes:
    if len(id_h) != HALF_SIZE:
        raise Malformed("ID half must be 16 bytes")
    service = bytes([0x13, AD_SERVICE_DATA16]) + UUID_PNS2.to_bytes(2, "little") + id_h
    payload = _uuid_block(UUID_PNS2) + service
    assert len(payload) == SCAN_RSP_SIZE
    return payload


@dataclass(frozen=True)
class AdvFields:
    half: bytes
    version: int
    tx_gain: int
    fragment: int


def _expect_uuid(block: bytes, service_uuid: bytes, expected: int) -> None:
    if block[:2] != bytes([0x03, AD_COMPLETE_UUID16]):
        raise Malformed("missing complete 16-bit UUID list")
    listed = int.from_bytes(block[2:4], "little")
    carried = int.from_bytes(service_uuid, "little")
    if listed != carried:
        raise Malformed(f"UUID list 0x{listed:04X} disagrees with service data 0x{carried:04X}")
    if listed != expected:
        raise NotOurService(f"service 0x{listed:04X}")


def parse_adv(payload: bytes) -> AdvFields:
    """Decode an advertising payload; ``fragment`` is 0 for ID_L, 1 for ID_H."""
    if len(payload) != ADV_SIZE:
        raise Malformed(f"advertising payload must be {ADV_SIZE} bytes, got {len(payload)}")
    if payload[:2] != FLAGS_BLOCK[:2]:
        raise Malformed("missing flags structure")
    _expect_uuid(payload[3:7], payload[7:9], UUID_PNS1)
    half = payload[9:25]
    version, tx_gain, reserved0, reserved1 = payload[25:29]
    if reserved0 > 1 or reserved1 != 0:
        raise Malformed(f"reserved bytes 0x{reserved0:02X}{reserved1:02X}")
    return AdvFields(half, version, tx_gain, reserved0)


def parse_scan_rsp(payload: bytes) -> bytes:
    if len(payload) != SCAN_RSP_SIZE:
        raise Malformed(f"scan response must be {SCAN_RSP_SIZE} bytes, got {len(payload)}")
    if payload[4:6] != bytes([0x13, AD_SERVICE_DATA16]):
        raise Malformed("missing service data header")
    _expect_uuid(payload[:4], payload[6:8], UUID_PNS2)
    return payload[8:24]


@dataclass(frozen=True)
class Fragment:
    """One parsed half: ``index`` is LOW (ID_L) or HIGH (ID_H)."""

    index: int
    data: bytes


def parse_payload(payload: bytes) -> Fragment:
    if len(payload) == ADV_SIZE:
        adv = parse_adv(payload)
        return Fragment(adv.fragment, adv.half)
    if len(payload) == SCAN_RSP_SIZE:
        return Fragment(HIGH, parse_scan_rsp(payload))
    raise Malformed(f"unexpected payload length {len(payload)}")


def build_beacon(ebid: bytes, version: int = 1, tx_gain: int = 0) -> list[bytes]:
    """Scan-response variant: ``[ADV_IND payload, SCAN_RSP payload]``."""
    id_l, id_h = segment_ebid(ebid)
    return [build_adv(id_l, version, tx_gain), build_scan_rsp(id_h)]


def build_fragment_sequence(ebid: bytes, version: int = 1, tx_gain: int = 0) -> list[bytes]:
    """Fragmentation variant: alternating ``[ID_L, ID_H]`` advertising payloads."""
    id_l, id_h = segment_ebid(ebid)
    return [build_adv(id_l, version, tx_gain, fragment=LOW),
            build_adv(id_h, version, tx_gain, fragment=HIGH)]


@dataclass
class _Partial:
    halves: dict = field(default_factory=dict)
    poisoned: bool = False


class ReassemblyCache:
    """Joins EBID halves by advertiser address within a single epoch."""

    def __init__(self):
        self.epoch: int | None = None
        self._entries: dict[bytes, _Partial] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def rotate(self, epoch: int) -> None:
        if epoch != self.epoch:
            self._entries.clear()
            self.epoch = epoch

    def observe(self, device_addr: bytes, fragment: Fragment, epoch: int) -> bytes | None:
        if len(device_addr) != 6:
            raise ValueError("device address must be 6 bytes")
        self.rotate(epoch)
        entry = self._entries.setdefault(device_addr, _Partial())
        if entry.poisoned:
            return None
        known = entry.halves.get(fragment.index)
        if known is not None and known != fragment.data:
            # two different halves from one address: spoofing or collision
            entry.halves.clear()
            entry.poisoned = True
            return None
        entry.halves[fragment.index] = fragment.data
        if LOW in entry.halves and HIGH in entry.halves:
            return reassemble(entry.halves[LOW], entry.halves[HIGH])
        return None


def observe(cache: ReassemblyCache, device_addr: bytes, fragment: Fragment,
            epoch: int) -> bytes | None:
    return cache.observe(device_addr, fragment, epoch)
