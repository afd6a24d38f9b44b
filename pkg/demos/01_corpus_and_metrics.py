# coding: utf-8

# # Synthetic disfluencies and streaming metrics
#
# This walk-through generates a small synthetic corpus, looks at one
# utterance, and then scores a hand-written prediction log with the
# incremental metrics.

# In[1]:

from streamdisfl.corpus import GeneratorConfig, TokenRole, generate_corpus
from streamdisfl.decoder import PredictionLog, render_log
from streamdisfl.metrics import evaluate_logs, role_table


# Every utterance is a skeleton of fluent words. Before each skeleton word a
# disfluency may be inserted: a reparandum, an optional filler (the
# interregnum) and a repair that starts by repeating the first reparandum
# word. Standalone fillers outside any repair are edit terms.

# In[2]:

config = GeneratorConfig(seed=3)
corpus = generate_corpus(config, 200)
utt = next(u for u in corpus if TokenRole.INTERREGNUM in u.roles)
for token, role, label in zip(utt.tokens, utt.roles, utt.labels):
    print(f"{token:>6}  {role.display_name:<13} {label}")


# Only reparanda and interregna are labelled disfluent. The generator's
# mixture arithmetic predicts the disfluent fraction, which the sample
# should be close to.

# In[3]:

observed = sum(sum(u.labels) for u in corpus) / sum(len(u) for u in corpus)
print("observed %.3f  expected %.3f" % (observed, config.expected_disfluent_fraction()))


# A prediction log holds one row per prefix: F (fluent), D (disfluent) or
# "." (waiting). Here a model waits on "the" until it sees the repair.

# In[4]:

tokens = "i think the real the principal".split()
log = PredictionLog("demo", ("F", "FF", "FF.", "FF..", "FFDD.", "FFDDFF"), (0, 0, 1, 1, 0, 0))
for line in render_log(log, tokens):
    print(line)


# The report pools the streaming counts over every (prefix, token) pair that
# received a decision, and measures stability (EO), detection delay (TTD,
# FTD) and waiting (AWT).

# In[5]:

roles = [TokenRole.FLUENT, TokenRole.FLUENT, TokenRole.REPARANDUM, TokenRole.REPARANDUM,
         TokenRole.REPAIR_ONSET, TokenRole.REPAIR]
report = evaluate_logs([log], [roles], "hand-written")
for key, value in report.row().items():
    print(f"{key:>9}: {value}")

for row in role_table([log], [roles]):
    print(row)
