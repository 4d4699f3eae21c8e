//! Tile I/O, manifests, normalization, compositing and the toy scene corpus.

mod composite;
mod dataset;
mod manifest;
mod normalize;
mod raster;
mod scene;
mod toy;

pub use composite::{cloud_fraction, make_composite, Composite};
pub use dataset::{dataset_iterator, Batch, BatchIter, Dataset};
pub use manifest::{load_manifest, ManifestRecord, Split, TileManifest, TilePaths, MANIFEST_FILE};
pub use normalize::{denormalize, normalize, NormalizationSpec};
pub use raster::{read_blob, read_raster, read_tiff, sidecar_path, write_blob, GeoBox, Raster, RasterDescriptor};
pub use scene::{load_scene, SceneInstance, MAX_REFERENCE_CLOUD, OPTICAL_BANDS, SAR_BANDS};
pub use toy::{
    corpus_hash, generate_toy_scene, validate_toy_size, write_toy_corpus, CorpusSummary, DEFAULT_TOY_SIZE,
    TOY_TILE_MULTIPLE,
};
