"""Hand a written cache to the trainer package and report what it says."""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass


@dataclass
class VerifyReport:
    validate_exit: int
    train_exit: int
    validate_output: str
    train_output: str

    @property
    def ok(self) -> bool:
        return self.validate_exit == 0 and self.train_exit == 0


def verify_against_primary(out_root, primary: str = "loffta") -> VerifyReport:
    """Run the trainer CLI's `validate` plus a 10-step smoke `train`.

    Only the executable interface is used; nothing is imported from the
    trainer package.
    """
    exe = shutil.which(primary)
    if exe is None:
        raise EnvironmentError(
            f"trainer executable {primary!r} not found on PATH")
    v = subprocess.run([exe, "validate", "--cache", str(out_root)],
                       capture_output=True, text=True)
    with tempfile.TemporaryDirectory() as tmp:
        t = subprocess.run(
            [exe, "train", "--cache", str(out_root), "--out", tmp,
             "--max-steps", "10", "--batch-size", "8",
             "--embed-dim", "32", "--depth", "1", "--heads", "2"],
            capture_output=True, text=True)
    return VerifyReport(validate_exit=v.returncode, train_exit=t.returncode,
                        validate_output=v.stdout + v.stderr,
                        train_output=t.stdout + t.stderr)
