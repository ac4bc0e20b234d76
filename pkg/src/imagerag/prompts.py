"""Prompt texts for the VLM protocol.

These strings are a wire contract: requests must embed them byte-for-byte
(only ``{prompt}`` gets substituted), and the test suite checks outgoing
request bodies against fixture copies.  Do not reflow or "fix" the wording.
"""

MATCH_DECISION_PROMPT = (
    'Does this image match the prompt "{prompt}"? '
    "Consider both content and style aspects. Only answer yes or no."
)

MISSING_CONCEPTS_PROMPT = (
    "What are the differences between this image and the required prompt? "
    "In your answer only provide missing concepts in terms of content and style, "
    "each in a separate line. For example, if the prompt is "
    '"An oil painting of a sheep and a car" and the image is a painting of a car '
    "but not an oil painting, the missing concepts will be:\n"
    "oil painting style\n"
    "a sheep"
)

CAPTION_GENERATION_PROMPT = (
    "For each concept you suggested above, please suggest an image caption "
    "describing an image that explains this concept only. The captions should be "
    "stand-alone description of the images, assuming no knowledge of the given "
    "images and prompt, that I can use to lookup images with automatically. "
    "In your answer only provide the image captions, each in a new line with "
    "nothing else other than the caption."
)

REPHRASE_PROMPT = (
    "Please rephrase the following prompt to make it easier and clearer for the "
    "text-to-image generation model that generated the above image for this "
    "prompt. The goal is to generate an image that matches the given text prompt. "
    "If the prompt is already clear, return it as it is. Simplify and shorten "
    "long descriptions of known objects/entities but DO NOT change the original "
    "meaning of the text prompt. If the prompt contains rare words, change those "
    "words to a description of their meaning. In your answer only provide the "
    'prompt and nothing else. The prompt to be rephrased: "{prompt}".'
)
