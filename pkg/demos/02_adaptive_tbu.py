"""Inside one cluster: a three-TB chain whose middle TB gets slower half way
through.  The adaptive TBU scheduler moves TBUs to the slow TB."""

from collections import Counter

from octosim.fabric.engine import EV_ASSIGN
from octosim.scenarios import run_adaptive

for variant in ("emotion", "skewed"):
    base = run_adaptive(variant, "baseline")
    adap = run_adaptive(variant, "adaptive", trace=True)
    moves = Counter(ev[3] for ev in adap.trace if ev[2] == EV_ASSIGN)
    print(f"{variant:8s} baseline {base.now:>9d}  adaptive {adap.now:>9d}  "
          f"speedup {base.now / adap.now:.2f}x  reassignments to TB {dict(sorted(moves.items()))}")
