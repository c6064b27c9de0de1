"""Trusted Hart services: keystore, attestation, peripherals and sealed storage."""

from .keystore import KeyKind, KeyRecord, Keystore
from .messages import EnclaveIdentity, ErrorCode, MsgKind, Status, ThMessage, SM_CHANNEL
from .report import AttestationReport, Layer, Verdict, build_report, encoded_size, verify_report
from .service import TrustedHart
from .spm import Decision, PeripheralClass, PeripheralDescriptor, PeripheralPolicy, SecurePeripheralManager
from .storage import SealedBlob, SealedStorage

__all__ = [
    "AttestationReport", "Decision", "EnclaveIdentity", "ErrorCode", "KeyKind", "KeyRecord", "Keystore",
    "Layer", "MsgKind", "PeripheralClass", "PeripheralDescriptor", "PeripheralPolicy", "SM_CHANNEL",
    "SealedBlob", "SealedStorage", "SecurePeripheralManager", "Status", "ThMessage", "TrustedHart",
    "Verdict", "build_report", "encoded_size", "verify_report",
]
