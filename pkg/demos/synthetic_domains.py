"""
Synthetic re-identification domains
===================================

Each identity is a smooth spatial template with a colour offset. Each domain
renders its identities through a fixed camera style (blur, contrast, gain,
bias, noise), and every view adds its own brightness and colour cast.
"""

import numpy as np

from metabin import generate
from metabin.normalization import BinLayerParams, TRAIN, batch_norm, instance_norm
from metabin.autograd import Tensor

ds = generate(seed=0)
print(f"{ds.num_domains} source domains, {len(ds.targets)} target domains, "
      f"{ds.num_identities} training identities")

# Channel means per domain are dominated by the camera bias.
for d in ds.sources + ds.targets:
    means = d.images.mean(axis=(0, 2, 3))
    print(f"domain {d.domain_id}: bias {np.round(d.style.bias, 2)}  channel means {np.round(means, 2)}")

###############################################################################
# Batch statistics keep the per-domain offsets; instance statistics remove them.

x = Tensor(np.concatenate([d.images[:32] for d in ds.sources]).astype(np.float64))
bn = batch_norm(x, BinLayerParams.create(3), TRAIN).data
inn = instance_norm(x, BinLayerParams.create(3)).data
for name, out in (("batch norm", bn), ("instance norm", inn)):
    per_domain = out.reshape(ds.num_domains, 32, 3, -1).mean(axis=(1, 3))
    print(f"{name:>13}: spread of per-domain channel means {per_domain.std(axis=0).mean():.3f}")
