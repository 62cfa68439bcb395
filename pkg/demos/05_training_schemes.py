"""
Which masking scheme to train with
==================================

Train the fusion model three ways: on clean audio only, with every noun and
place masked (EntityMask) and with RandWordMask.  Then mask every word of
one category at a time in the test set and measure recovery.
"""

import sys

from mmasr import experiments as E

full = "--full" in sys.argv
setup = E.Setup(seed=0) if full else E.Setup(seed=0, sizes=(400, 100, 100), config=E.desk_config(max_epochs=4))
data = E.build_data(setup)
table = E.compare_schemes(data, setup, log=lambda e: print(f"  epoch {e.epoch}: loss {e.train_loss:.3f}"))
print(E.format_table(table))

###############################################################################
# Clean training never learns to fill a gap.  EntityMask learns it for
# nouns and places only, while RandWordMask spreads the skill across
# categories.
