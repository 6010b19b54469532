"""Prompt bank for scene generation, inpainting, and detection queries."""

SCENE_POSITIVE = (
    "A factory interior, close-up of industrial equipment, image captured "
    "via a colored high-quality high-end inspection camera, clear mechanical "
    "details, realistic metallic textures, authentic lighting, natural "
    "industrial setting, accurate machinery components, subtle equipment "
    "variations, realistic wear and tear."
)

SCENE_NEGATIVE = (
    "Text, watermark, low quality, jitter, nsfw, stickers, labels, blurred "
    "details, distorted equipment, cartoonish or unrealistic textures, "
    "unnatural colors, overly bright lighting, irrelevant objects, human "
    "presence, animals, plants, visible text, duplicated or repeated "
    "elements, unrealistic proportions, overly polished surfaces, "
    "plastic-like or artificial appearance."
)

INPAINT_NEGATIVE = (
    "Cartoon, anime, illustration, painting, drawing, lowres, blurry, "
    "pixelated, overexposed, unrealistic, stylized, clipart, animated, text, "
    "watermark, signature, frame, border, extra limbs, distorted hands, "
    "shiny, plastic, toy-like, glossy, yellow tint, white overlay, newspaper "
    "texture, poster art, human figures, fingers, deformed body parts, "
    "3D render, CGI, artifact, sketch."
)

# Per-class inpainting prompts. oil-spill carries the full curated prompt;
# the others follow the same pattern and can be overridden in config.
INPAINT_POSITIVE = {
    "oil-spill": (
        "Realistic oil spill in factory with brown or black stains, "
        "industrial scene with dark oil leakage stains, brown-black oily "
        "patch on factory floor, factory oil spill with realistic black "
        "sludge, realistic factory environment with oil smears, black or "
        "brown oil leakage on industrial surface, dirty oil-stained floor "
        "in realistic factory, blackened spill area in a manufacturing "
        "plant, authentic oil spill marks on brown concrete, industrial "
        "realism with black or brown oil spill."
    ),
    "floor-stain": (
        "Realistic dark floor stain in factory, discolored patch on "
        "industrial concrete, weathered stain marks on plant flooring, "
        "authentic grime and residue stains, realistic industrial floor "
        "staining."
    ),
    "chemical-discoloration": (
        "Realistic chemical discoloration on industrial surface, corroded "
        "and bleached patch on factory floor, chemical residue staining "
        "concrete, authentic chemical spill discoloration in a plant."
    ),
}

DEFAULT_INPAINT_POSITIVE = (
    "Realistic {class_name} on an industrial floor, authentic textures, "
    "blended into the surrounding factory scene."
)

INSPECTOR_SYSTEM = (
    "You are a certified industrial safety inspector specializing in "
    "hazardous spill, leak, and stain detection across factories and energy "
    "plants. Only report verifiable safety hazards. Do not guess or "
    "speculate."
)

DETECT_USER_PATTERN = (
    "Detect and return the bounding-box coordinates of the {class_name} "
    "in COCO JSON format, if present."
)


def inpaint_positive(class_name: str) -> str:
    return INPAINT_POSITIVE.get(
        class_name, DEFAULT_INPAINT_POSITIVE.format(class_name=class_name)
    )
