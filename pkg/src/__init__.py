"""
BurstMamba: selective state-space kernels and burst super-resolution at desk scale.
"""

import hashlib
import os

__version__ = "0.3.0"


def source_digest(length: int = 12) -> str:
    """Short sha256 over the package sources, in file-name order."""
    digest = hashlib.sha256()
    package_dir = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(package_dir)):
        if name.endswith(".py"):
            digest.update(name.encode("utf-8"))
            with open(os.path.join(package_dir, name), "rb") as f:
                digest.update(f.read())
    return digest.hexdigest()[:length]


def build_id() -> str:
    return f"burstmamba-{__version__}-g{source_digest()}"
