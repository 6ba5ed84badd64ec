"""dpalign: a verifier for an imperative differential-privacy DSL.

Programs annotate variables with randomness-alignment distances; the checker
transforms them into cost-instrumented nonprobabilistic targets, the budget
module proves `v_eps <= budget` by weakest preconditions, inference fills in
missing distances and can search for the cheapest provable alignment, and the
interpreters validate alignments empirically.
"""

__version__ = "0.1.0"

from .core import Program, TargetProgram, TypingEnv  # noqa: F401
from .parser import parse_program, print_program, print_target  # noqa: F401
