//! Identifier newtypes shared by every module.

use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(v: usize) -> Self {
                $name(v as u32)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Dense item index into the catalog.
    ItemId
);
id_type!(
    /// Fine-grained tag such as a style or colour.
    AttrId
);
id_type!(
    /// Coarse tag such as "shoes".
    CatId
);
id_type!(UserId);
id_type!(
    /// Slot identifiers increase monotonically within a conversation.
    SlotId
);
