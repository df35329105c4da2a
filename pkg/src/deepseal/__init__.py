"""deepseal: passport-sealed classifiers with steganographic licensing.

Trains dual-branch classifiers whose verification branch is bound to a
hash-derived owner signature, issues per-user licenses by invertibly hiding
ID images inside owner passports, verifies ownership/license claims, and
ships the attack harness used to stress the scheme.
"""

__version__ = "0.1.0"

from .models import ModelSpec, build_model  # noqa: F401
from .passport_layer import PassportLayer, PassportPair  # noqa: F401
from .signature import (BinarySignature, derive_signature,  # noqa: F401
                        extract_signature, sign_agreement)
from .stego import StegoKey, StegoNetwork, psnr, train_isn  # noqa: F401
from .training import TrainConfig, strip_verification, train_dual  # noqa: F401
from .verification import Thresholds, VerificationReport, run_chain  # noqa: F401
