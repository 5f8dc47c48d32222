"""64 bit FNV-1a checksums of payload regions."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes, start: int = FNV_OFFSET) -> int:
    """Return the FNV-1a hash of `data`, optionally continuing from a previous value `start`."""
    value = start
    for byte in bytes(data):
        value = ((value ^ byte) * FNV_PRIME) & MASK
    return value


def hex_digest(data: bytes) -> str:
    return f"{fnv1a_64(data):016x}"
