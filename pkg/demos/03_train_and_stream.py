# coding: utf-8

# # Training a small streaming tagger
#
# A quick run on a reduced corpus (a few minutes on one CPU core). The
# acceptance suite trains the full-size version.

# In[1]:

import logging

from streamdisfl.corpus import GeneratorConfig, Vocabulary, generate_corpus, split_corpus
from streamdisfl.decoder import decode_corpus, render_log, stream_decode
from streamdisfl.encoder import EncoderConfig
from streamdisfl.metrics import evaluate_logs
from streamdisfl.trainer import make_train_config, train

logging.basicConfig(level=logging.INFO, format="%(message)s")


# In[2]:

corpus = generate_corpus(GeneratorConfig(seed=0), 800)
train_set, dev_set, test_set = split_corpus(corpus, [0.8, 0.1, 0.1], seed=0)
vocab = Vocabulary.build(train_set)
encoder = EncoderConfig(vocab_size=len(vocab))


# Two models: the plain full-sequence tagger (both extra weights at zero)
# and the streaming tagger with the desk preset. The preset trains the
# first 10 of 30 epochs on the full-sequence loss, then raises the latency
# weight from 1 to 2 over the last 15.

# In[3]:

baseline, _ = train(train_set, dev_set, encoder, make_train_config(gamma=0.0, lambda_=0.0), vocab=vocab)
streaming, report = train(train_set, dev_set, encoder, make_train_config(), vocab=vocab)
print("best epoch", report.best_epoch)


# The baseline commits to every token immediately (lookahead 0); the
# streaming model may hold tokens back until it is confident.

# In[4]:

roles = [u.roles for u in test_set]
for name, model, decoder in (("LA=0", baseline, "la:0"), ("streaming", streaming, "dynamic")):
    row = evaluate_logs(decode_corpus(model, test_set, vocab, decoder), roles, name).row()
    print(" ".join(f"{k}={row[k]:.3f}" for k in ("F1", "P", "R", "EO", "AWT", "Final F1")), name)


# Replaying one disfluent test utterance prefix by prefix.

# In[5]:

utt = next(u for u in test_set if sum(u.labels) >= 2)
log = stream_decode(streaming, vocab.encode(utt.tokens))
print(" ".join(utt.tokens))
for line in render_log(log, utt.tokens):
    print("   ", line)
