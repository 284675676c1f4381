import pytest

from spkadv import data
from spkadv import trainer as tr
from spkadv.adversary import AdversaryConfig, SpeakerTable
from spkadv.attention import AttentionConfig
from spkadv.encoder import EncoderConfig

TINY_MODEL = tr.ModelConfig(EncoderConfig(hidden_dim=6, num_layers=1),
                            AttentionConfig(embed_dim=4, decoder_dim=6, attention_dim=6),
                            AdversaryConfig(hidden_dim=5))


@pytest.fixture(scope="session")
def tiny_corpus():
    return data.generate_synthetic_corpus(data.CorpusConfig(
        num_speakers=4, utts_per_speaker=5, chars="abcde", max_symbols=3, seed=0))


@pytest.fixture
def tiny_params(tiny_corpus):
    speakers = SpeakerTable(sorted({u.speaker_id for u in tiny_corpus.utterances}))
    return tr.ModelParams.initialize(TINY_MODEL, tiny_corpus.vocab, speakers, seed=0)
