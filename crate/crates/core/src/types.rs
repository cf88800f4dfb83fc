//! Catalog items, interaction events and the identifiers shared by every stage.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Catalog item identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn new(s: impl Into<String>) -> Self {
        ItemId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ItemId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

/// How a query item relates to the target bought afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    View,
    Buy,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::View, Relation::Buy];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::View => "view",
            Relation::Buy => "buy",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "view" => Ok(Relation::View),
            "buy" => Ok(Relation::Buy),
            other => Err(Error::Input(format!("unknown relation {other:?}"))),
        }
    }
}

/// The three embedding roles an item can play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    View,
    Buy,
    Target,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::View, Role::Buy, Role::Target];

    /// Offset of this role's output inside a three-role forward pass.
    pub fn slot(self) -> usize {
        match self {
            Role::View => 0,
            Role::Buy => 1,
            Role::Target => 2,
        }
    }
}

impl From<Relation> for Role {
    fn from(r: Relation) -> Self {
        match r {
            Relation::View => Role::View,
            Relation::Buy => Role::Buy,
        }
    }
}

/// A catalog record. Only `title` and `category` feed the encoder; the other
/// fields drive eligible-set construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
    /// Category path from root to leaf.
    pub category: Vec<String>,
    #[serde(default)]
    pub deal: bool,
    /// Release date in days since epoch.
    #[serde(default)]
    pub release_date: i64,
    #[serde(default)]
    pub popularity: u64,
}

impl Item {
    /// Text handed to the tokenizer: title, then the category path.
    pub fn metadata(&self) -> String {
        format!("{} | {}", self.title, self.category.join(" > "))
    }

    /// Leaf category, used for diversity and per-category rules.
    pub fn leaf_category(&self) -> &str {
        self.category.last().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    View,
    Buy,
}

impl From<EventType> for Relation {
    fn from(e: EventType) -> Self {
        match e {
            EventType::View => Relation::View,
            EventType::Buy => Relation::Buy,
        }
    }
}

/// One customer interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub customer_id: String,
    pub item_id: ItemId,
    pub event_type: EventType,
    /// Epoch seconds.
    pub timestamp: i64,
    #[serde(default)]
    pub session_id: Option<String>,
}

impl Event {
    pub fn validate(&self) -> Result<()> {
        if self.timestamp < 0 {
            return Err(Error::Input(format!(
                "event for customer {} has negative timestamp",
                self.customer_id
            )));
        }
        Ok(())
    }
}

/// Catalog indexed by position and id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<Item>,
    by_id: std::collections::HashMap<ItemId, usize>,
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut by_id = std::collections::HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(Catalog { items, by_id })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.iter().map(|i| &i.id)
    }
}
