"""Desk-scale simulator of a Trusted-Hart TEE architecture for RISC-V-class devices."""

__version__ = "0.1.0"
