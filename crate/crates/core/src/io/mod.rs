//! Volume file formats: uncompressed single-file NIfTI-1 and the `vvol`
//! directory format (`header.json` + `data.raw`).

pub mod nifti;
pub mod vvol;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Nifti1,
    Vvol,
}

impl VolumeFormat {
    /// `.nii` files are NIfTI-1, everything else is treated as a vvol directory.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::Vvol,
        }
    }
}

impl FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nifti1" | "nifti" | "nii" => Ok(VolumeFormat::Nifti1),
            "vvol" => Ok(VolumeFormat::Vvol),
            other => Err(Error::Config(format!("unknown volume format '{other}'"))),
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Nifti1 => nifti::read(path.as_ref()),
        VolumeFormat::Vvol => vvol::read(path.as_ref()),
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Nifti1 => nifti::write(v, path.as_ref()),
        VolumeFormat::Vvol => vvol::write(v, path.as_ref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..5, 1usize..5, 1usize..5, prop::array::uniform3(0.1f32..4.0))
            .prop_flat_map(|(d, h, w, spacing)| {
                prop::collection::vec(-1.0e6f32..1.0e6, d * h * w)
                    .prop_map(move |vals| Volume::from_vec((d, h, w), vals, spacing).unwrap())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_is_bit_exact(v in arb_volume()) {
            let dir = tempfile::tempdir().unwrap();
            for (name, fmt) in [("v.nii", VolumeFormat::Nifti1), ("v.vvol", VolumeFormat::Vvol)] {
                let path = dir.path().join(name);
                write_volume(&v, &path, fmt).unwrap();
                let back = read_volume(&path, fmt).unwrap();
                prop_assert_eq!(back.shape(), v.shape());
                prop_assert_eq!(back.voxel_size_mm(), v.voxel_size_mm());
                let a: Vec<u32> = v.as_slice().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.as_slice().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn format_from_path() {
        assert_eq!(VolumeFormat::from_path(Path::new("a/b.nii")), VolumeFormat::Nifti1);
        assert_eq!(VolumeFormat::from_path(Path::new("a/b.vvol")), VolumeFormat::Vvol);
        assert_eq!("nifti1".parse::<VolumeFormat>().unwrap(), VolumeFormat::Nifti1);
        assert!("dicom".parse::<VolumeFormat>().is_err());
    }
}
