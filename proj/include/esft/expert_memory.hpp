// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

// Virtual-memory-backed expert storage on a simulated device.
//
// A VirtualWeightTensor reserves a contiguous virtual span of
// num_slots * expert_size bytes and backs only the pages that intersect a
// loaded expert. Pages come from a PhysicalMemoryPool of fixed-size pages.
// Experts need not be page aligned: a page straddled by two loaded experts is
// mapped once and reference counted per intersecting expert.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "esft/error.hpp"

namespace esft {

inline constexpr std::size_t kMiB = std::size_t{1} << 20;

struct PageConfig {
  std::size_t page_size = 2 * kMiB;
  std::size_t pool_capacity = 1024;  // pages

  void validate() const {
    require(page_size > 0, ErrorKind::kConfig, "page_size must be > 0");
    require(pool_capacity > 0, ErrorKind::kConfig, "pool_capacity must be > 0");
  }
};

/// Half-open range of page indices [first, last).
struct PageSpan {
  std::uint64_t first = 0;
  std::uint64_t last = 0;
  std::uint64_t size() const { return last - first; }
  bool empty() const { return first == last; }
};

/// Pages intersecting the half-open byte interval [begin, end). A zero-length
/// interval covers nothing.
constexpr PageSpan page_cover(std::uint64_t begin, std::uint64_t end, std::uint64_t page_size) {
  if (end <= begin) return {begin / page_size, begin / page_size};
  return {begin / page_size, (end - 1) / page_size + 1};
}

using PageHandle = std::uint32_t;

struct PoolStats {
  std::size_t created = 0;  // pages obtained from the device and not trimmed
  std::size_t in_use = 0;   // pages mapped into some tensor
  std::size_t free = 0;     // pages on the free list
  std::size_t capacity = 0;
  std::size_t available() const { return free + (capacity - created); }
};

/// Whether pool pages carry real storage. Accounting-only pools track page
/// ownership without allocating bytes, for dry runs at real model sizes.
enum class Backing { kMemory, kAccountingOnly };

class PhysicalMemoryPool {
 public:
  explicit PhysicalMemoryPool(PageConfig cfg, Backing backing = Backing::kMemory) : cfg_(cfg), backing_(backing) {
    cfg_.validate();
    if (backing_ == Backing::kMemory)
      require(cfg_.page_size % sizeof(float) == 0, ErrorKind::kConfig, "backed pools need page_size divisible by 4");
    next_va_ = cfg_.page_size;
  }

  PhysicalMemoryPool(const PhysicalMemoryPool&) = delete;
  PhysicalMemoryPool& operator=(const PhysicalMemoryPool&) = delete;

  const PageConfig& config() const { return cfg_; }
  std::size_t page_size() const { return cfg_.page_size; }
  bool backed() const { return backing_ == Backing::kMemory; }

  /// Hands out a page, preferring the free list over creating a new one.
  PageHandle acquire() {
    std::lock_guard lock(mu_);
    PageHandle h;
    if (!free_list_.empty()) {
      h = free_list_.back();
      free_list_.pop_back();
    } else {
      if (created_ >= cfg_.pool_capacity)
        raise(ErrorKind::kAllocation, "page pool exhausted: requested 1 page, 0 available of " + std::to_string(cfg_.pool_capacity));
      if (!vacant_.empty()) {
        h = vacant_.back();
        vacant_.pop_back();
      } else {
        h = static_cast<PageHandle>(pages_.size());
        pages_.emplace_back();
      }
      if (backed()) pages_[h].data = std::make_unique<float[]>(cfg_.page_size / sizeof(float));
      pages_[h].live = true;
      ++created_;
    }
    pages_[h].in_use = true;
    ++in_use_;
    return h;
  }

  void release(PageHandle h) {
    std::lock_guard lock(mu_);
    require(h < pages_.size() && pages_[h].live && pages_[h].in_use, ErrorKind::kInvariant,
            "release of a page that is not in use: " + std::to_string(h));
    pages_[h].in_use = false;
    --in_use_;
    free_list_.push_back(h);
  }

  /// Throws an allocation error unless `pages` more pages can be supplied.
  void require_available(std::size_t pages) const {
    std::lock_guard lock(mu_);
    const std::size_t avail = free_list_.size() + (cfg_.pool_capacity - created_);
    if (pages > avail)
      raise(ErrorKind::kAllocation,
            "page pool exhausted: requested " + std::to_string(pages) + " pages, " + std::to_string(avail) + " available");
  }

  /// Returns every free page to the device. Never called implicitly.
  std::size_t trim() {
    std::lock_guard lock(mu_);
    const std::size_t n = free_list_.size();
    for (PageHandle h : free_list_) {
      pages_[h].data.reset();
      pages_[h].live = false;
      vacant_.push_back(h);
    }
    free_list_.clear();
    created_ -= n;
    return n;
  }

  /// Page storage, or nullptr for accounting-only pools.
  float* data(PageHandle h) { return pages_[h].data.get(); }
  const float* data(PageHandle h) const { return pages_[h].data.get(); }

  /// Carves a page-aligned virtual range; consumes no pages.
  std::uint64_t reserve_address(std::uint64_t bytes) {
    std::lock_guard lock(mu_);
    const std::uint64_t base = next_va_;
    const std::uint64_t pages = (bytes + cfg_.page_size - 1) / cfg_.page_size;
    next_va_ += (pages + 1) * cfg_.page_size;  // one guard page between reservations
    return base;
  }

  PoolStats stats() const {
    std::lock_guard lock(mu_);
    return {created_, in_use_, free_list_.size(), cfg_.pool_capacity};
  }

  std::vector<PageHandle> free_list() const {
    std::lock_guard lock(mu_);
    return free_list_;
  }

 private:
  struct Page {
    std::unique_ptr<float[]> data;
    bool live = false;
    bool in_use = false;
  };

  PageConfig cfg_;
  Backing backing_;
  mutable std::mutex mu_;
  std::vector<Page> pages_;
  std::vector<PageHandle> free_list_;
  std::vector<PageHandle> vacant_;
  std::size_t created_ = 0;
  std::size_t in_use_ = 0;
  std::uint64_t next_va_ = 0;
};

/// Consecutive expert slots of one layer.
struct SlotRange {
  int layer = 0;
  std::size_t first_slot = 0;
  std::size_t count = 0;
};

/// Expert memory manager for one layer's virtual weight tensor.
class VirtualWeightTensor {
 public:
  static constexpr PageHandle kUnmapped = UINT32_MAX;

  VirtualWeightTensor(PhysicalMemoryPool& pool, std::size_t num_slots, std::size_t expert_size, int layer = 0)
      : pool_(&pool), layer_(layer), num_slots_(num_slots), expert_size_(expert_size) {
    require(expert_size_ > 0, ErrorKind::kConfig, "expert_size must be > 0");
    base_addr_ = pool.reserve_address(span_bytes());
    const std::uint64_t pages = page_cover(0, span_bytes(), pool.page_size()).size();
    page_handle_.assign(pages, kUnmapped);
    refcount_.assign(pages, 0);
    loaded_.assign(num_slots_, false);
  }

  VirtualWeightTensor(const VirtualWeightTensor&) = delete;
  VirtualWeightTensor& operator=(const VirtualWeightTensor&) = delete;
  VirtualWeightTensor(VirtualWeightTensor&& o) noexcept { *this = std::move(o); }
  VirtualWeightTensor& operator=(VirtualWeightTensor&& o) noexcept {
    if (this != &o) {
      release_all();
      pool_ = std::exchange(o.pool_, nullptr);
      layer_ = o.layer_;
      base_addr_ = o.base_addr_;
      num_slots_ = o.num_slots_;
      expert_size_ = o.expert_size_;
      page_handle_ = std::move(o.page_handle_);
      refcount_ = std::move(o.refcount_);
      loaded_ = std::move(o.loaded_);
      mapped_pages_ = std::exchange(o.mapped_pages_, 0);
    }
    return *this;
  }
  ~VirtualWeightTensor() { release_all(); }

  int layer() const { return layer_; }
  std::uint64_t base_addr() const { return base_addr_; }
  std::size_t num_slots() const { return num_slots_; }
  std::size_t expert_size() const { return expert_size_; }
  std::uint64_t span_bytes() const { return static_cast<std::uint64_t>(num_slots_) * expert_size_; }
  std::size_t span_pages() const { return page_handle_.size(); }
  std::size_t page_size() const { return pool_->page_size(); }
  std::size_t pages_mapped() const { return mapped_pages_; }
  std::uint64_t mapped_bytes() const { return static_cast<std::uint64_t>(mapped_pages_) * page_size(); }

  /// Virtual address of the first byte of `slot`.
  std::uint64_t start_addr(std::size_t slot) const { return base_addr_ + static_cast<std::uint64_t>(slot) * expert_size_; }

  bool is_loaded(std::size_t slot) const { return slot < num_slots_ && loaded_[slot]; }
  bool is_mapped(std::size_t page) const { return page_handle_[page] != kUnmapped; }
  std::uint32_t refcount(std::size_t page) const { return refcount_[page]; }

  /// Pages of this tensor intersecting slot's byte range.
  PageSpan slot_pages(std::size_t slot) const {
    const std::uint64_t a = static_cast<std::uint64_t>(slot) * expert_size_;
    return page_cover(a, a + expert_size_, page_size());
  }

  /// Number of pages a map_experts(r) call would request from the pool.
  std::size_t pages_needed(const SlotRange& r) const {
    check_range(r);
    const std::uint64_t a = static_cast<std::uint64_t>(r.first_slot) * expert_size_;
    const PageSpan cover = page_cover(a, a + r.count * expert_size_, page_size());
    std::size_t n = 0;
    for (std::uint64_t p = cover.first; p < cover.last; ++p) n += is_mapped(p) ? 0 : 1;
    return n;
  }

  /// Backs every page intersecting the range. Pages already mapped by a
  /// neighbouring range are shared, not requested again. All-or-nothing.
  void map_experts(const SlotRange& r) {
    check_range(r);
    for (std::size_t s = r.first_slot; s < r.first_slot + r.count; ++s)
      if (loaded_[s]) raise(ErrorKind::kUsage, where(s) + " is already loaded");
    pool_->require_available(pages_needed(r));
    for (std::size_t s = r.first_slot; s < r.first_slot + r.count; ++s) {
      const PageSpan ps = slot_pages(s);
      for (std::uint64_t p = ps.first; p < ps.last; ++p) {
        if (refcount_[p]++ == 0) {
          page_handle_[p] = pool_->acquire();
          ++mapped_pages_;
        }
      }
      loaded_[s] = true;
    }
  }

  /// Drops one reference per intersecting page; pages reaching zero go back
  /// to the pool's free list.
  void unmap_experts(const SlotRange& r) {
    check_range(r);
    for (std::size_t s = r.first_slot; s < r.first_slot + r.count; ++s)
      if (!loaded_[s]) raise(ErrorKind::kUsage, where(s) + " is not loaded");
    for (std::size_t s = r.first_slot; s < r.first_slot + r.count; ++s) {
      const PageSpan ps = slot_pages(s);
      for (std::uint64_t p = ps.first; p < ps.last; ++p) {
        if (--refcount_[p] == 0) {
          pool_->release(page_handle_[p]);
          page_handle_[p] = kUnmapped;
          --mapped_pages_;
        }
      }
      loaded_[s] = false;
    }
  }

  void write_expert(std::size_t slot, std::span<const float> packed) {
    require_loaded(slot);
    require(packed.size_bytes() == expert_size_, ErrorKind::kConfig, "write_expert: payload is not expert_size bytes");
    copy_bytes(slot, reinterpret_cast<const std::byte*>(packed.data()), nullptr);
  }

  void read_expert(std::size_t slot, std::span<float> out) const {
    require_loaded(slot);
    require(out.size_bytes() == expert_size_, ErrorKind::kConfig, "read_expert: buffer is not expert_size bytes");
    copy_bytes(slot, nullptr, reinterpret_cast<std::byte*>(out.data()));
  }

  /// Direct pointer when the expert lies inside one page; otherwise gathers
  /// into `scratch`.
  const float* expert_data(std::size_t slot, std::vector<float>& scratch) const {
    require_loaded(slot);
    const PageSpan ps = slot_pages(slot);
    if (ps.size() == 1) {
      const std::uint64_t off = static_cast<std::uint64_t>(slot) * expert_size_ - ps.first * page_size();
      return pool_->data(page_handle_[ps.first]) + off / sizeof(float);
    }
    scratch.resize(expert_size_ / sizeof(float));
    read_expert(slot, scratch);
    return scratch.data();
  }

 private:
  std::string where(std::size_t slot) const {
    return "layer " + std::to_string(layer_) + " slot " + std::to_string(slot);
  }

  void check_range(const SlotRange& r) const {
    require(r.first_slot + r.count <= num_slots_, ErrorKind::kUsage,
            "slot range [" + std::to_string(r.first_slot) + ", " + std::to_string(r.first_slot + r.count) +
                ") exceeds " + std::to_string(num_slots_) + " slots");
  }

  void require_loaded(std::size_t slot) const {
    if (slot >= num_slots_ || !loaded_[slot]) raise(ErrorKind::kMemoryFault, "access to unmapped " + where(slot));
    require(pool_->backed(), ErrorKind::kMemoryFault, "accounting-only pool has no storage for " + where(slot));
  }

  // Copies expert_size bytes between a host buffer and the slot's pages.
  void copy_bytes(std::size_t slot, const std::byte* src, std::byte* dst) const {
    const std::uint64_t p_size = page_size();
    std::uint64_t addr = static_cast<std::uint64_t>(slot) * expert_size_;
    std::size_t done = 0;
    while (done < expert_size_) {
      const std::uint64_t page = addr / p_size, off = addr % p_size;
      const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(p_size - off, expert_size_ - done));
      auto* page_bytes = reinterpret_cast<std::byte*>(pool_->data(page_handle_[page])) + off;
      if (src) std::memcpy(page_bytes, src + done, n);
      else std::memcpy(dst + done, page_bytes, n);
      done += n;
      addr += n;
    }
  }

  void release_all() {
    if (!pool_) return;
    for (PageHandle& h : page_handle_) {
      if (h != kUnmapped) pool_->release(h);
      h = kUnmapped;
    }
    mapped_pages_ = 0;
  }

  PhysicalMemoryPool* pool_ = nullptr;
  int layer_ = 0;
  std::uint64_t base_addr_ = 0;
  std::size_t num_slots_ = 0;
  std::size_t expert_size_ = 0;
  std::vector<PageHandle> page_handle_;
  std::vector<std::uint32_t> refcount_;
  std::vector<bool> loaded_;
  std::size_t mapped_pages_ = 0;
};

/// Reserves a virtual span for num_slots experts; maps nothing.
inline VirtualWeightTensor reserve(PhysicalMemoryPool& pool, std::size_t num_slots, std::size_t expert_size, int layer = 0) {
  return VirtualWeightTensor(pool, num_slots, expert_size, layer);
}

}  // namespace esft
