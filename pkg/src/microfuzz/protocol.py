"""Controller/agent datagram protocol.

Frame layout (little-endian):

    magic   "UFZ1"
    u8      version (1)
    u8      message type (HELLO/TASK/RESULT/PING/PONG/ERROR)
    u32     payload length
    ...     payload
    u32     CRC32C over header + payload

TASK payload:   u64 task id, u8 variant, u16 code length, code bytes,
                u8 hook count, hooks as (u8 slot, u16 src).
RESULT payload: u64 task id, u8 exit code, u8 exit detail, eight u64
                registers, u8 flags, u16 ip, u64 rw digest, u16 coverage
                entry count, entries as (u16 addr, u16 count, u64
                last ip), then u32 executed bytes and u32 retired count
                (inputs to the fitness computation).

Task-id convention: ids of one fuzzing iteration share ``id >> 6``; the
agent keys the deterministic random supply on that quantity so a
testcase and its serialized twin draw identical hardware-random values,
while fault-model probability draws are keyed on the full id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"UFZ1"
VERSION = 1

MSG_HELLO = 0
MSG_TASK = 1
MSG_RESULT = 2
MSG_PING = 3
MSG_PONG = 4
MSG_ERROR = 5

VARIANT_PLAIN = 0
VARIANT_SERIALIZED = 1

#: dispatches belonging to one iteration share task_id >> ITERATION_SHIFT
ITERATION_SHIFT = 6

EXIT_CODES = {
    "Halt": 0,
    "Timeout": 1,
    "UndefinedOpcode": 2,
    "MemoryViolation": 3,
    "IoAccess": 4,
    "NondeterminismIntercept": 5,
    "EngineLockup": 6,
}
EXIT_NAMES = {code: name for name, code in EXIT_CODES.items()}

_HEADER = struct.Struct("<4sBBI")
_CRC = struct.Struct("<I")

MAX_FRAME = 64 * 1024


class ProtocolError(Exception):
    pass


class MalformedReply(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    pass


# CRC32C (Castagnoli), reflected polynomial 0x82F63B78.
def _make_crc32c_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ 0x82F63B78 if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC32C_TABLE = _make_crc32c_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    for b in data:
        crc = _CRC32C_TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, msg_type, len(payload))
    return header + payload + _CRC.pack(crc32c(header + payload))


def decode_frame(datagram: bytes) -> tuple[int, bytes]:
    if len(datagram) < _HEADER.size + _CRC.size:
        raise MalformedReply("frame too short")
    magic, version, msg_type, length = _HEADER.unpack_from(datagram, 0)
    if magic != MAGIC:
        raise MalformedReply(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"peer speaks version {version}")
    expected = _HEADER.size + length + _CRC.size
    if len(datagram) != expected:
        raise MalformedReply(f"length field says {expected}, got {len(datagram)}")
    payload = datagram[_HEADER.size:_HEADER.size + length]
    (crc,) = _CRC.unpack_from(datagram, _HEADER.size + length)
    if crc != crc32c(datagram[:_HEADER.size + length]):
        raise MalformedReply("checksum mismatch")
    return msg_type, payload


@dataclass(frozen=True)
class TaskMessage:
    task_id: int
    variant: int
    code: bytes
    hooks: tuple[tuple[int, int], ...] = ()  # (slot, src)

    def encode(self) -> bytes:
        out = struct.pack("<QBH", self.task_id, self.variant, len(self.code))
        out += self.code
        out += struct.pack("<B", len(self.hooks))
        for slot, src in self.hooks:
            out += struct.pack("<BH", slot, src)
        return encode_frame(MSG_TASK, out)

    @classmethod
    def decode(cls, payload: bytes) -> "TaskMessage":
        task_id, variant, code_len = struct.unpack_from("<QBH", payload, 0)
        pos = 11
        code = payload[pos:pos + code_len]
        if len(code) != code_len:
            raise MalformedReply("task code truncated")
        pos += code_len
        (count,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        hooks = []
        for _ in range(count):
            slot, src = struct.unpack_from("<BH", payload, pos)
            hooks.append((slot, src))
            pos += 3
        if pos != len(payload):
            raise MalformedReply("trailing bytes in task payload")
        return cls(task_id=task_id, variant=variant, code=bytes(code), hooks=tuple(hooks))


@dataclass(frozen=True)
class ResultMessage:
    task_id: int
    exit_code: int
    exit_detail: int
    regs: tuple[int, ...]
    zf: int
    cf: int
    ip: int
    rw_digest: int
    coverage: tuple[tuple[int, int, int], ...] = ()  # (addr, count, last_ip)
    executed_bytes: int = 0
    retired: int = 0

    def encode(self) -> bytes:
        flags = (self.zf & 1) | ((self.cf & 1) << 1)
        out = struct.pack("<QBB", self.task_id, self.exit_code, self.exit_detail)
        out += struct.pack("<8Q", *self.regs)
        out += struct.pack("<BHQ", flags, self.ip, self.rw_digest)
        out += struct.pack("<H", len(self.coverage))
        for addr, count, last_ip in self.coverage:
            out += struct.pack("<HHQ", addr, count, last_ip)
        out += struct.pack("<II", self.executed_bytes, self.retired)
        return encode_frame(MSG_RESULT, out)

    @classmethod
    def decode(cls, payload: bytes) -> "ResultMessage":
        try:
            task_id, exit_code, exit_detail = struct.unpack_from("<QBB", payload, 0)
            regs = struct.unpack_from("<8Q", payload, 10)
            flags, ip, digest = struct.unpack_from("<BHQ", payload, 74)
            (count,) = struct.unpack_from("<H", payload, 85)
            pos = 87
            coverage = []
            for _ in range(count):
                addr, cnt, last_ip = struct.unpack_from("<HHQ", payload, pos)
                coverage.append((addr, cnt, last_ip))
                pos += 12
            executed, retired = struct.unpack_from("<II", payload, pos)
            pos += 8
        except struct.error as err:
            raise MalformedReply(str(err)) from err
        if pos != len(payload):
            raise MalformedReply("trailing bytes in result payload")
        return cls(
            task_id=task_id, exit_code=exit_code, exit_detail=exit_detail,
            regs=tuple(regs), zf=flags & 1, cf=(flags >> 1) & 1, ip=ip,
            rw_digest=digest, coverage=tuple(coverage),
            executed_bytes=executed, retired=retired,
        )


def rng_supply_for(agent_seed: int, task_id: int) -> int:
    """Deterministic random-supply key shared across one iteration."""
    import hashlib

    iteration = task_id >> ITERATION_SHIFT
    digest = hashlib.blake2b(f"supply:{agent_seed}:{iteration}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")
