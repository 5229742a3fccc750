use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeypointGroup, MESH_POINTS};
use crate::error::{Error, Result};
use crate::store;

/// Mesh indices of the keypoint subset, one list per facial part.
///
/// The default table is calibration data for a 468-point face mesh; the
/// eyelid, lip and head-frame entries follow the usual mesh topology, the
/// iris slots are placeholders a detector adapter is expected to remap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointIndexTable {
    pub schema_version: u32,
    pub left_eyelid: Vec<usize>,
    pub right_eyelid: Vec<usize>,
    pub left_iris: Vec<usize>,
    pub right_iris: Vec<usize>,
    pub mouth: Vec<usize>,
    pub head_frame: Vec<usize>,
    /// Outer lip contour, used only for crops when configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mouth_outer: Option<Vec<usize>>,
}

pub const DEFAULT_LEFT_EYELID: [usize; 16] = [
    263, 249, 390, 373, 374, 380, 381, 382, 362, 398, 384, 385, 386, 387, 388, 466,
];
pub const DEFAULT_RIGHT_EYELID: [usize; 16] = [
    33, 7, 163, 144, 145, 153, 154, 155, 133, 173, 157, 158, 159, 160, 161, 246,
];
pub const DEFAULT_LEFT_IRIS: [usize; 5] = [257, 258, 286, 414, 463];
pub const DEFAULT_RIGHT_IRIS: [usize; 5] = [27, 28, 56, 190, 243];
pub const DEFAULT_MOUTH_INNER: [usize; 20] = [
    78, 191, 80, 81, 82, 13, 312, 311, 310, 415, 308, 324, 318, 402, 317, 14, 87, 178, 88, 95,
];
pub const DEFAULT_MOUTH_OUTER: [usize; 20] = [
    61, 185, 40, 39, 37, 0, 267, 269, 270, 409, 291, 375, 321, 405, 314, 17, 84, 181, 91, 146,
];
pub const DEFAULT_HEAD_FRAME: [usize; 4] = [10, 152, 234, 454];

impl Default for KeypointIndexTable {
    fn default() -> Self {
        Self {
            schema_version: store::SCHEMA_VERSION,
            left_eyelid: DEFAULT_LEFT_EYELID.to_vec(),
            right_eyelid: DEFAULT_RIGHT_EYELID.to_vec(),
            left_iris: DEFAULT_LEFT_IRIS.to_vec(),
            right_iris: DEFAULT_RIGHT_IRIS.to_vec(),
            mouth: DEFAULT_MOUTH_INNER.to_vec(),
            head_frame: DEFAULT_HEAD_FRAME.to_vec(),
            mouth_outer: Some(DEFAULT_MOUTH_OUTER.to_vec()),
        }
    }
}

impl KeypointIndexTable {
    pub fn indices(&self, group: KeypointGroup) -> &[usize] {
        match group {
            KeypointGroup::LeftEyelid => &self.left_eyelid,
            KeypointGroup::RightEyelid => &self.right_eyelid,
            KeypointGroup::LeftIris => &self.left_iris,
            KeypointGroup::RightIris => &self.right_iris,
            KeypointGroup::Mouth => &self.mouth,
            KeypointGroup::HeadFrame => &self.head_frame,
        }
    }

    /// Checks group sizes, index ranges and pairwise disjointness.
    ///
    /// Out-of-range indices are reported as [`Error::IndexOutOfRange`]; the
    /// remaining violations as [`Error::InvalidTable`].
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != store::SCHEMA_VERSION {
            return Err(Error::InvalidTable(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let mut seen = vec![false; MESH_POINTS];
        let mut check = |name: &str, list: &[usize], expected: usize| -> Result<()> {
            if list.len() != expected {
                return Err(Error::InvalidTable(format!(
                    "group {name} has {} indices, expected {expected}",
                    list.len()
                )));
            }
            for &i in list {
                if i >= MESH_POINTS {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: MESH_POINTS,
                    });
                }
                if seen[i] {
                    return Err(Error::InvalidTable(format!(
                        "index {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
            Ok(())
        };
        for group in KeypointGroup::ALL {
            check(group.name(), self.indices(group), group.expected_len())?;
        }
        if let Some(outer) = &self.mouth_outer {
            check("mouth_outer", outer, 20)?;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        KeypointGroup::ALL
            .iter()
            .map(|g| self.indices(*g).len())
            .sum()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let table: Self =
            serde_json::from_str(s).map_err(|e| Error::InvalidTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: Self = store::read_json(path)?;
        table.validate()?;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_valid_with_66_points() {
        let t = KeypointIndexTable::default();
        t.validate().unwrap();
        assert_eq!(t.total(), 66);
        let sizes: Vec<usize> = KeypointGroup::ALL.iter().map(|g| t.indices(*g).len()).collect();
        assert_eq!(sizes, vec![16, 16, 5, 5, 20, 4]);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let mut t = KeypointIndexTable::default();
        t.head_frame[0] = t.mouth[0];
        assert!(matches!(t.validate(), Err(Error::InvalidTable(_))));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut t = KeypointIndexTable::default();
        t.left_iris[2] = 500;
        assert!(matches!(
            t.validate(),
            Err(Error::IndexOutOfRange { index: 500, .. })
        ));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let t = KeypointIndexTable::default();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(KeypointIndexTable::from_json_str(&s).unwrap(), t);
        let bad = s.replacen("{", "{\"extra\": 1,", 1);
        assert!(KeypointIndexTable::from_json_str(&bad).is_err());
    }
}
