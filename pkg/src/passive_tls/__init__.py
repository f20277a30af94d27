"""Passive decryption of TLS 1.2 traffic using key material exported by endpoints."""

from .crypto import AuthTagMismatch, SessionKeys, derive_master_secret, derive_session_keys, tls_prf
from .engine import EngineConfig, RunReport, run_capture, sweep_delays
from .flows import Direction, FlowKey
from .keystore import KeyKind, KeyLogEntry, KeyStore

__all__ = [
    "AuthTagMismatch",
    "Direction",
    "EngineConfig",
    "FlowKey",
    "KeyKind",
    "KeyLogEntry",
    "KeyStore",
    "RunReport",
    "SessionKeys",
    "derive_master_secret",
    "derive_session_keys",
    "run_capture",
    "sweep_delays",
    "tls_prf",
]
