pub mod candidates;
pub mod oracle;
