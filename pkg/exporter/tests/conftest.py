import numpy as np
import pytest
import torch


@pytest.fixture(scope="session")
def gpt2_dir(tmp_path_factory):
    """Tiny random-weight GPT-2-architecture model saved to a local path."""
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=64, n_positions=128, n_embd=32, n_layer=2, n_head=2,
        bos_token_id=0, eos_token_id=0,
    )
    model = GPT2LMHeadModel(config)
    path = tmp_path_factory.mktemp("models") / "tiny-gpt2"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def llama_gqa_dir(tmp_path_factory):
    """Tiny random-weight LLaMA-architecture model with grouped-query attention."""
    from transformers import LlamaConfig, LlamaForCausalLM

    torch.manual_seed(1)
    config = LlamaConfig(
        vocab_size=64, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
        num_attention_heads=4, num_key_value_heads=2, max_position_embeddings=128,
        bos_token_id=0, eos_token_id=0,
    )
    model = LlamaForCausalLM(config)
    path = tmp_path_factory.mktemp("models") / "tiny-llama-gqa"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def word_tokenizer_dir(tmp_path_factory, gpt2_dir):
    """Word-level tokenizer saved beside the tiny model for the text path."""
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import PreTrainedTokenizerFast

    words = ["the", "cache", "holds", "keys", "and", "values", "under", "budget"]
    vocab = {"<unk>": 0, **{w: i + 1 for i, w in enumerate(words)}}
    tok = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = Whitespace()
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>")
    fast.save_pretrained(gpt2_dir)
    return gpt2_dir


@pytest.fixture()
def prompt_ids():
    return np.random.default_rng(3).integers(1, 64, size=8).tolist()
