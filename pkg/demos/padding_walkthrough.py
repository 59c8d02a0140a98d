"""Three clients with three model sizes share one item table.

A Small client owns the first 2 columns, a Medium client the first 4 and a
Large client all 8.  Each sends back the change it made to its slice; the
server zero-pads every change to full width, sums them, and hands each tier
the prefix of the result.  Because every tier starts from a prefix of the
same table, the tiers stay prefixes of one another after the update.
"""

import numpy as np

from hetefedrec.aggregation import aggregate_item_updates, apply_item_updates
from hetefedrec.model import init_params
from hetefedrec.training import UpdatePacket

rng = np.random.default_rng(7)
widths, num_items = (2, 4, 8), 5
params = init_params(num_items, widths, rng)
print("before: prefix gap", params.prefix_gap())

packets = []
for client_id, tier in enumerate((0, 1, 2)):
    # a pretend local update; real ones come from local_train
    delta = rng.normal(0, 0.01, (num_items, widths[tier]))
    packets.append(UpdatePacket(client_id, tier, delta, {}))
    print(f"client {client_id} ({['small', 'medium', 'large'][tier]}) uploads a {delta.shape} change")

agg = aggregate_item_updates(packets, widths, num_items)
after = apply_item_updates(params, agg)

# Column 0 received all three changes, columns 4..7 only the Large one.
print("per-column contributors:", [sum(p.delta_V.shape[1] > c for p in packets) for c in range(8)])
print("after: prefix gap", after.prefix_gap())
assert after.prefix_gap() == 0.0
