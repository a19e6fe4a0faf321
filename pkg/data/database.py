import json
import logging
from pathlib import Path
import cv2
import numpy as np
from pydantic import BaseModel, ValidationError
from data.exceptions import ArtifactIOError, ConfigError, ImageDecodeError
from data.models import FeatureVector, Raster

logger = logging.getLogger(__name__)


def _prepare_path(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"Cannot create directory {path.parent}: {e}") from e
    return path


def _dumps(document: BaseModel) -> str:
    payload = document.model_dump(mode='json', by_alias=True)
    return json.dumps(payload, sort_keys=True, separators=(',', ':')) + '\n'


def insert_document(path, document: BaseModel) -> Path:
    path = _prepare_path(path)
    try:
        path.write_text(_dumps(document), encoding='utf-8')
    except OSError as e:
        raise ArtifactIOError(f"Failed to write {path}: {e}") from e
    logger.debug("wrote %s", path)
    return path


def read_document(path, model_cls):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError as e:
        raise ConfigError(f"{path} does not exist") from e
    except OSError as e:
        raise ArtifactIOError(f"Failed to read {path}: {e}") from e
    try:
        return model_cls.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"{path} is not a valid {model_cls.__name__} document: {e}") from e


def insert_image(path, raster: Raster) -> Path:
    path = _prepare_path(path)
    ok, encoded = cv2.imencode('.png', cv2.cvtColor(raster.pixels, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ArtifactIOError(f"Failed to encode {path} as PNG")
    try:
        path.write_bytes(encoded.tobytes())
    except OSError as e:
        raise ArtifactIOError(f"Failed to write {path}: {e}") from e
    return path


def read_image(path) -> Raster:
    path = Path(path)
    try:
        data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    except FileNotFoundError as e:
        raise ConfigError(f"{path} does not exist") from e
    except OSError as e:
        raise ArtifactIOError(f"Failed to read {path}: {e}") from e
    decoded = cv2.imdecode(data, cv2.IMREAD_COLOR) if data.size else None
    if decoded is None:
        raise ImageDecodeError(f"{path} is not a decodable image")
    return Raster(pixels=cv2.cvtColor(decoded, cv2.COLOR_BGR2RGB))


def feature_cache_key(image_digest: str, kind: str, dictionary_digest: str | None) -> str:
    return f"{image_digest[:20]}-{kind}-{(dictionary_digest or 'none')[:12]}"


def read_cached_feature(cache_dir, key: str) -> FeatureVector | None:
    path = Path(cache_dir) / 'features' / f'{key}.json'
    if not path.exists():
        return None
    try:
        return FeatureVector.model_validate(json.loads(path.read_text(encoding='utf-8')))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.warning("ignoring unreadable feature cache entry %s: %s", path, e)
        return None


def update_cached_feature(cache_dir, key: str, vector: FeatureVector) -> Path:
    return insert_document(Path(cache_dir) / 'features' / f'{key}.json', vector)


def read_cached_crop(cache_dir, key: str) -> Raster | None:
    path = Path(cache_dir) / 'crops' / f'{key}.png'
    if not path.exists():
        return None
    try:
        return read_image(path)
    except (ImageDecodeError, ArtifactIOError) as e:
        logger.warning("ignoring unreadable crop cache entry %s: %s", path, e)
        return None


def update_cached_crop(cache_dir, key: str, crop: Raster) -> Path:
    return insert_image(Path(cache_dir) / 'crops' / f'{key}.png', crop)


def insert_text(path, text: str) -> Path:
    path = _prepare_path(path)
    try:
        path.write_text(text, encoding='utf-8')
    except OSError as e:
        raise ArtifactIOError(f"Failed to write {path}: {e}") from e
    return path
