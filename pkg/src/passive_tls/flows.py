"""Connection identity shared by the capture, parser and engine layers."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass

IPAddress = ipaddress.IPv4Address | ipaddress.IPv6Address


class Direction(enum.Enum):
    CLIENT_TO_SERVER = "c2s"
    SERVER_TO_CLIENT = "s2c"

    @property
    def reverse(self) -> "Direction":
        if self is Direction.CLIENT_TO_SERVER:
            return Direction.SERVER_TO_CLIENT
        return Direction.CLIENT_TO_SERVER


@dataclass(frozen=True, order=True)
class FlowKey:
    """A TCP connection, oriented client -> server."""

    src_ip: IPAddress
    src_port: int
    dst_ip: IPAddress
    dst_port: int
    protocol: str = "TCP"

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.protocol)

    def canonical(self) -> tuple["FlowKey", Direction]:
        """Map this key and its reversed twin to one key plus a direction flag.

        Without role information the lexically smaller endpoint is taken as
        the client; the capture layer re-orients keys once it sees a SYN.
        """
        a = (self.src_ip.version, int(self.src_ip), self.src_port)
        b = (self.dst_ip.version, int(self.dst_ip), self.dst_port)
        if a <= b:
            return self, Direction.CLIENT_TO_SERVER
        return self.reversed(), Direction.SERVER_TO_CLIENT

    def sender(self, direction: Direction) -> tuple[IPAddress, int]:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.src_ip, self.src_port
        return self.dst_ip, self.dst_port

    def __str__(self) -> str:
        return f"{_fmt(self.src_ip, self.src_port)}-{_fmt(self.dst_ip, self.dst_port)}"

    def slug(self) -> str:
        """Filesystem-safe rendering used for payload dump names."""
        return f"{self.src_ip}_{self.src_port}-{self.dst_ip}_{self.dst_port}".replace(":", ".")


def _fmt(ip: IPAddress, port: int) -> str:
    if ip.version == 6:
        return f"[{ip}]:{port}"
    return f"{ip}:{port}"
