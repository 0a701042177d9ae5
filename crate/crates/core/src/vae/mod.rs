//! Point-voxel attention VAE over colored surface clouds, producing sparse latent
//! color fields decodable to per-voxel feature lattices and queryable RGB.

pub mod attention;
mod config;
mod latent;
mod model;
mod train;

pub use config::VaeConfig;
pub use latent::{FeatureGrid, LatentField, LATENT_MAGIC, LATENT_VERSION, LOGVAR_MAX, LOGVAR_MIN};
pub use model::{kl_divergence, reparameterize, vae_loss, ColorField, Vae, POINT_INPUT_DIM, VAE_CHECKPOINT_KIND};
pub(crate) use model::center_tensor;
pub use train::{augmented_color, train_vae, Plateau, PreparedCloud, VaeTrainOptions};
