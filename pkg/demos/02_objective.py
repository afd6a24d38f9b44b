# coding: utf-8

# # The training objective on a toy example
#
# The loss of one utterance adds three terms: cross-entropy on the full
# utterance, a prefix term that only counts tokens before the first wait,
# and a latency cost that charges every waited token by how far it lags
# behind the end of the prefix.

# In[1]:

import torch

from streamdisfl.encoder import PrefixOutputs
from streamdisfl.objective import LossConfig, compute_mask, soft_mask_weights, total_loss


# Fake head outputs for a 4-token utterance, one entry per prefix. The wait
# logits say "wait" on the third token.

# In[2]:

labels = [0, 1, 0, 0]
outputs = []
for i in range(1, 5):
    dis = torch.zeros((i, 2), dtype=torch.float64)
    dis[:, 1] = torch.tensor([-2.0, 2.0, -1.0, -2.0][:i], dtype=torch.float64)
    wait = torch.zeros((i, 2), dtype=torch.float64)
    wait[:, 1] = torch.tensor([-3.0, -3.0, 3.0, -3.0][:i], dtype=torch.float64)
    outputs.append(PrefixOutputs(dis, wait))

p_wait = torch.softmax(outputs[3].wait_logits, -1)[:, 1]
print("wait probabilities", p_wait.numpy().round(3))
print("hard mask", compute_mask(p_wait).weights)
print("soft mask", soft_mask_weights(p_wait).numpy().round(3))


# With the hard mask the third token and everything after it are ignored by
# the prefix loss. The soft relaxation multiplies (1 - p_wait) along the row
# so gradients reach the wait head.

# In[3]:

for mode in ("soft_relaxation", "hard_stop_gradient"):
    parts = total_loss(outputs, labels, LossConfig(gamma=1.9, lambda_=0.1, mask_mode=mode)).detach()
    print(mode, {k: round(v, 4) for k, v in parts.as_dict().items()})


# Setting both weights to zero leaves only the full-utterance term, which
# is the ordinary non-incremental tagger.

# In[4]:

print(total_loss(outputs, labels, LossConfig(gamma=0.0, lambda_=0.0)).detach().as_dict())
