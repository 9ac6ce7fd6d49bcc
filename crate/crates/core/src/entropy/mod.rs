//! Rate model, entropy coding and the bitstream container.

pub mod bitstream;
pub mod codec;
pub mod hyperprior;
pub mod pmf;
pub mod range_coder;
pub mod rate;

pub use bitstream::{Bitstream, HEADER_BYTES};
pub use codec::{analyze, compress, decompress, Decoded};
pub use hyperprior::HyperpriorParams;
pub use pmf::{ElementPmf, Pmf};
pub use range_coder::{RangeDecoder, RangeEncoder};
pub use rate::{bit_allocation_map, estimate_rate, RateEstimate};
