"""Black-box domain adaptation: teacher construction, losses and the experiment harness."""

from ._core import *  # noqa: F401,F403
from ._core import ConfigError, RuntimeFailure  # noqa: F401
