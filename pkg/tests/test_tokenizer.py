"""
The following tests check the reasoning-text tokenizer.
"""

import pytest

from pyautobid.tokenizer import PAD_ID, SPECIAL_TOKENS, UNK_ID, Tokenizer, split_tokens


def test_split_tokens() -> None:
    """Test that digits and punctuation are split one by one."""
    assert split_tokens("CPA ratio 1.25, DIRECTION: INCREASE") == [
        "CPA", "ratio", "1", ".", "2", "5", ",", "DIRECTION", ":", "INCREASE",
    ]


def test_fit_and_encode() -> None:
    """Test vocabulary ranking, unknown words and truncation."""
    tokenizer = Tokenizer.fit(["spend spend pace", "pace spend"], vocab_size=98)
    assert tuple(tokenizer.vocab[:2]) == SPECIAL_TOKENS
    # two word slots left: the most frequent words win
    assert tokenizer.vocab[-2:] == ["spend", "pace"]

    ids = tokenizer.encode("spend more 7")
    assert ids[0] == tokenizer.vocab.index("spend")
    assert ids[1] == UNK_ID
    assert tokenizer.decode(ids) == "spend <unk> 7"
    assert PAD_ID not in ids

    assert tokenizer.encode("a b c d", max_len=2).tolist() == tokenizer.encode("c d").tolist()


def test_round_trip_and_validation() -> None:
    """Test to_dict()/from_dict() and vocabulary checks."""
    tokenizer = Tokenizer.fit(["DIRECTION: DECREASE"], vocab_size=128)
    again = Tokenizer.from_dict(tokenizer.to_dict())
    assert again.vocab == tokenizer.vocab
    assert len(again) == len(tokenizer)
    with pytest.raises(ValueError):
        Tokenizer(["word"])
    with pytest.raises(ValueError):
        Tokenizer.fit([], vocab_size=10)
